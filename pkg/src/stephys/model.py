"""The target classifier: a small CNN, its trainer, and weight persistence."""

from __future__ import annotations

import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"STW1"


class ModelError(ValueError):
    pass


class WeightFileError(ModelError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training diverged (loss is NaN) in epoch {epoch}")


def fnv1a_64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=np.float32))


class ClassifierModel:
    """``channels``-many conv3×3 → relu → maxpool2 blocks and a linear head.

    Input is an ``(N, H, W, 3)`` batch; output is ``(N, K)`` logits.
    """

    def __init__(
        self,
        input_shape: Sequence[int] = (32, 32, 3),
        num_classes: int = 4,
        channels: Sequence[int] = (8, 16, 32),
        seed: int = 0,
    ):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.channels = tuple(int(c) for c in channels)
        h, w, c = self.input_shape
        scale = 2 ** len(self.channels)
        if h % scale or w % scale:
            raise ModelError(f"input {h}x{w} is not divisible by {scale}")
        rng = np.random.default_rng([seed, 0x30DE1])
        self.conv_w: list[Tensor] = []
        self.conv_b: list[Tensor] = []
        for out_c in self.channels:
            std = np.sqrt(2.0 / (c * 9))
            self.conv_w.append(Tensor(rng.normal(0, std, (out_c, c, 3, 3)), requires_grad=True, dtype=np.float32))
            self.conv_b.append(Tensor(np.zeros(out_c), requires_grad=True, dtype=np.float32))
            c = out_c
        features = c * (h // scale) * (w // scale)
        std = np.sqrt(1.0 / features)
        self.head_w = Tensor(rng.normal(0, std, (features, self.num_classes)), requires_grad=True, dtype=np.float32)
        self.head_b = Tensor(np.zeros(self.num_classes), requires_grad=True, dtype=np.float32)
        if self.parameter_count() >= 10**6:
            raise ModelError("parameter count must stay below 1e6")

    @property
    def spec_string(self) -> str:
        h, w, c = self.input_shape
        blocks = ";".join(f"conv3x3:{o},relu,pool2" for o in self.channels)
        return f"cnn;input={h}x{w}x{c};{blocks};linear:{self.num_classes}"

    @property
    def fingerprint(self) -> int:
        return fnv1a_64(self.spec_string)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for w, b in zip(self.conv_w, self.conv_b):
            params += [w, b]
        return params + [self.head_w, self.head_b]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "ClassifierModel":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ag.ShapeError("model.forward", x.shape, (None, *self.input_shape))

    def forward(self, images) -> Tensor:
        x = _as_batch(images)
        self.check_input(x)
        h = ag.transpose(x, (0, 3, 1, 2))
        for w, b in zip(self.conv_w, self.conv_b):
            h = ag.max_pool2(ag.relu(ag.conv2d(h, w, b, stride=1, padding=1)))
        h = ag.reshape(h, (h.shape[0], -1))
        return ag.add(ag.matmul(h, self.head_w), self.head_b)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.logits(images, batch_size).argmax(axis=1)

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with ag.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i : i + batch_size]).data)
        return np.concatenate(out)


class LinearModel:
    """Logits ``W·z + b`` over flattened pixels; the closed-form oracle model."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, input_shape=(32, 32, 3), dtype=np.float32):
        self.input_shape = tuple(input_shape)
        self.weight = Tensor(np.asarray(weight).reshape(int(np.prod(self.input_shape)), -1), requires_grad=True, dtype=dtype)
        self.num_classes = self.weight.shape[1]
        if bias is None:
            bias = np.zeros(self.num_classes)
        self.bias = Tensor(bias, requires_grad=True, dtype=dtype)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def forward(self, images) -> Tensor:
        x = _as_batch(images)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ag.ShapeError("linear.forward", x.shape, (None, *self.input_shape))
        flat = ag.reshape(x, (x.shape[0], -1))
        return ag.add(ag.matmul(flat, self.weight), self.bias)

    __call__ = forward


# -------------------------------------------------------------- training
@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive, learning_rate non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class TrainReport:
    epochs: list[EpochMetrics] = field(default_factory=list)
    heldout_accuracy: float | None = None
    seconds: float = 0.0


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or self.lr == 0:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            if p.grad is None or self.lr == 0:
                continue
            b *= self.momentum
            b += p.grad
            p.data -= (self.lr * b).astype(p.dtype)


def accuracy(model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float((model.predict(images) == labels).mean())


def train(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, config: TrainConfig | None = None) -> TrainReport:
    """Fit ``model`` in place; a seeded split of the corpus is held out."""
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng([config.seed, 0x7EA1])
    order = rng.permutation(len(labels))
    n_val = int(round(len(labels) * config.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    params = model.parameters()
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        total, correct, seen = 0.0, 0, 0
        for i in range(0, len(perm), config.batch_size):
            batch = perm[i : i + config.batch_size]
            for p in params:
                p.grad = None
            logits = model.forward(images[batch])
            loss = ag.softmax_cross_entropy(logits, labels[batch])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch)
            ag.backward(loss)
            opt.step()
            total += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(axis=1) == labels[batch]).sum())
            seen += len(batch)
        val_acc = accuracy(model, images[val_idx], labels[val_idx]) if n_val else None
        metrics = EpochMetrics(epoch, total / seen, correct / seen, val_acc)
        report.epochs.append(metrics)
        log.info("epoch %d loss %.4f train %.3f val %s", epoch, metrics.loss, metrics.train_accuracy, val_acc)
    for p in params:
        p.grad = None
    report.heldout_accuracy = report.epochs[-1].val_accuracy
    report.seconds = time.perf_counter() - start
    return report


# ------------------------------------------------------------ persistence
def _header(model: ClassifierModel) -> bytes:
    h, w, c = model.input_shape
    text = (
        f"spec={model.spec_string}\n"
        f"K={model.num_classes}\n"
        f"input={h}x{w}x{c}\n"
        f"fingerprint={model.fingerprint:016x}\n"
    )
    return text.encode("utf-8")


def save_weights(model: ClassifierModel, path: str | Path) -> None:
    header = _header(model)
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            ag.write_tensor(fh, p.data.astype(np.float32))


def _parse_spec(spec: str) -> dict:
    parts = spec.split(";")
    if not parts or parts[0] != "cnn":
        raise WeightFileError(f"unsupported model spec {spec!r}")
    fields = {}
    channels = []
    for part in parts[1:]:
        if part.startswith("input="):
            fields["input_shape"] = tuple(int(v) for v in part[6:].split("x"))
        elif part.startswith("conv3x3:"):
            channels.append(int(part.split(",")[0][8:]))
        elif part.startswith("linear:"):
            fields["num_classes"] = int(part[7:])
    fields["channels"] = tuple(channels)
    return fields


def read_weight_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(4)
    if magic != WEIGHTS_MAGIC:
        raise WeightFileError(f"{path}: bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise WeightFileError(f"{path}: truncated header")
    (size,) = struct.unpack("<I", raw)
    body = fh.read(size)
    if len(body) != size:
        raise WeightFileError(f"{path}: truncated header")
    header = dict(line.split("=", 1) for line in body.decode("utf-8").splitlines() if line)
    if int(header["fingerprint"], 16) != fnv1a_64(header["spec"]):
        raise WeightFileError(f"{path}: header fingerprint does not match its spec string")
    return header


def load_weights(path: str | Path, model: ClassifierModel | None = None) -> ClassifierModel:
    """Load weights, either into ``model`` (spec must match) or into a new model."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        if model is None:
            model = ClassifierModel(**_parse_spec(header["spec"]))
        elif int(header["fingerprint"], 16) != model.fingerprint:
            raise WeightFileError(
                f"{path}: model spec mismatch: file has {header['spec']!r}, model is {model.spec_string!r}"
            )
        raw = fh.read(4)
        if len(raw) != 4:
            raise WeightFileError(f"{path}: truncated tensor count")
        (count,) = struct.unpack("<I", raw)
        params = model.parameters()
        if count != len(params):
            raise WeightFileError(f"{path}: expected {len(params)} tensors, found {count}")
        arrays = []
        try:
            for p in params:
                arr = ag.read_tensor(fh)
                if arr.shape != p.shape:
                    raise WeightFileError(f"{path}: tensor shape {arr.shape} does not match {p.shape}")
                arrays.append(arr)
        except ag.TensorFormatError as exc:
            raise WeightFileError(f"{path}: {exc}") from None
    for p, arr in zip(params, arrays):
        p.data = arr.astype(np.float32)
        p.grad = None
    return model


def weights_bytes(model: ClassifierModel) -> bytes:
    buf = io.BytesIO()
    for p in model.parameters():
        ag.write_tensor(buf, p.data)
    return buf.getvalue()
