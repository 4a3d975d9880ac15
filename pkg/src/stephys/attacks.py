"""Gradient-sign and Adam attacks over any pipeline mode.

Attacks run on a batch of images at once, but every image is independent: the
ascended objective is the sum of per-image losses, so each image's gradient is
its own, and random initialisation draws from a per-image generator seeded by
``seed ^ image_index``.

A pipeline is anything with ``objective(x, delta, labels, indices, targeted)``
returning per-image losses on the tape, ``evaluate(x, delta, labels, indices)``
returning an :class:`~stephys.ste.Evaluation`, and a ``model`` whose
``parameters()`` are frozen while the attack runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class AttackConfig:
    algorithm: str = "pgd"  # fgsm | pgd | adam
    epsilon: float | None = 8 / 255  # None means unbounded
    steps: int = 12
    step_size: float = 1 / 255  # PGD step, or the Adam learning rate
    random_init: bool = True
    targeted: bool = False
    target_label: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("fgsm", "pgd", "adam"):
            raise ValueError(f"unknown attack algorithm {self.algorithm!r}")
        if self.epsilon is not None and (self.epsilon < 0 or not math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be a finite value >= 0, or None for unbounded")
        if self.epsilon is None and self.algorithm != "adam":
            raise ValueError(f"{self.algorithm} needs a finite epsilon")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size < 0 or (self.step_size == 0 and self.algorithm == "pgd"):
            raise ValueError("step_size must be > 0")
        if self.targeted and self.target_label is None:
            raise ValueError("targeted attacks need target_label")

    @property
    def name(self) -> str:
        """``[Optimizer]-[Iterations]-[Learning Rate]`` with the rate in 1/255 units."""
        if self.algorithm == "fgsm":
            return f"FGSM-1-{_fmt255(self.epsilon)}"
        label = "PGD" if self.algorithm == "pgd" else "Adam"
        return f"{label}-{self.steps}-{_fmt255(self.step_size)}"

    @property
    def epsilon_255(self) -> str:
        return "inf" if self.epsilon is None else _fmt255(self.epsilon)


def _fmt255(value: float) -> str:
    return f"{value * 255:.6g}"


@dataclass
class AttackReport:
    """Per-iteration trace; row 0 is the initialisation, before any step."""

    config: AttackConfig
    mode: str
    labels: np.ndarray
    indices: list[int]
    loss_ste: list[np.ndarray] = field(default_factory=list)
    loss_digital: list[np.ndarray] = field(default_factory=list)
    loss_physical: list[np.ndarray] = field(default_factory=list)
    correct_digital: list[np.ndarray] = field(default_factory=list)
    correct_physical: list[np.ndarray] = field(default_factory=list)
    linf: list[np.ndarray] = field(default_factory=list)
    valid: list[np.ndarray] = field(default_factory=list)
    delta: np.ndarray | None = None
    final_prediction: np.ndarray | None = None
    seconds: float = 0.0

    def record(self, ev, delta: np.ndarray, x: np.ndarray) -> None:
        self.loss_ste.append(ev.loss_ste)
        self.loss_digital.append(ev.loss_digital)
        self.loss_physical.append(ev.loss_physical)
        self.correct_digital.append(ev.correct_digital)
        self.correct_physical.append(ev.correct_physical)
        flat = np.abs(delta).reshape(len(delta), -1)
        self.linf.append(flat.max(axis=1))
        adv = (x + delta).reshape(len(delta), -1)
        self.valid.append((adv.min(axis=1) >= -1e-6) & (adv.max(axis=1) <= 1 + 1e-6))
        self.final_prediction = ev.pred_physical

    def __len__(self) -> int:
        return len(self.loss_ste)

    def curve(self, key: str) -> np.ndarray:
        """``(iterations, images)`` array for one of the traced quantities."""
        return np.stack(getattr(self, key))

    def rows(self, image: int | None = None) -> list[dict]:
        """CSV rows for one image, or batch means when ``image`` is None.

        For the batch, ``linf`` is the largest over images and ``valid`` holds
        only if every image is valid.
        """
        out = []
        for it in range(len(self)):
            pick = (lambda a: float(a[image])) if image is not None else (lambda a: float(np.mean(a)))
            out.append(
                {
                    "iter": it,
                    "loss_ste": pick(self.loss_ste[it]),
                    "loss_digital": pick(self.loss_digital[it]),
                    "loss_physical": pick(self.loss_physical[it]),
                    "correct_digital": pick(self.correct_digital[it].astype(float)),
                    "correct_physical": pick(self.correct_physical[it].astype(float)),
                    "linf": float(self.linf[it][image] if image is not None else np.max(self.linf[it])),
                    "valid": bool(self.valid[it][image] if image is not None else np.all(self.valid[it])),
                }
            )
        return out

    def to_csv(self, image: int | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows(image):
            writer.writerow(
                [row["iter"]]
                + [f"{row[k]:.6f}" for k in ("loss_ste", "loss_digital", "loss_physical")]
                + [_fmt_flag(row["correct_digital"]), _fmt_flag(row["correct_physical"])]
                + [repr(row["linf"]), int(row["valid"])]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        cfg = asdict(self.config)
        return {
            "attack": self.config.name,
            "mode": self.mode,
            "epsilon_255": self.config.epsilon_255,
            "config": cfg,
            "images": len(self.labels),
            "iterations": len(self),
            "final_loss_physical": float(np.mean(self.loss_physical[-1])),
            "final_accuracy_digital": float(np.mean(self.correct_digital[-1])),
            "final_accuracy_physical": float(np.mean(self.correct_physical[-1])),
            "max_linf": float(np.max(self.curve("linf"))),
            "all_valid": bool(np.all(self.curve("valid"))),
            "seconds": round(self.seconds, 3),
        }

    def summary_json(self) -> str:
        data = self.summary()
        data.pop("seconds")
        return json.dumps(data, indent=2, sort_keys=True)


CSV_COLUMNS = [
    "iter",
    "loss_ste",
    "loss_digital",
    "loss_physical",
    "correct_digital",
    "correct_physical",
    "linf",
    "valid",
]


def _fmt_flag(v: float) -> str:
    return str(int(v)) if v in (0.0, 1.0) else f"{v:.6f}"


# ------------------------------------------------------------ primitives
def sign(g: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(g).astype(g.dtype)


def project(delta: np.ndarray, x: np.ndarray, epsilon: float | None) -> np.ndarray:
    """ε-ball clip first, then the validity box ``0 <= x + δ <= 1``."""
    if epsilon is not None:
        delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(delta, -x, 1.0 - x).astype(x.dtype)


def random_init(x: np.ndarray, epsilon: float, seed: int, indices: Sequence[int]) -> np.ndarray:
    out = np.empty_like(x)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng(seed ^ int(idx))
        out[row] = rng.uniform(-epsilon, epsilon, size=x.shape[1:])
    return project(out, x, epsilon)


def _labels_for(config: AttackConfig, labels: np.ndarray) -> np.ndarray:
    if config.targeted:
        return np.full_like(labels, config.target_label)
    return labels


def gradient(pipeline, x: np.ndarray, delta: np.ndarray, labels, indices, config: AttackConfig) -> np.ndarray:
    """∇δ of the summed per-image objective, in the pipeline's mode."""
    d = Tensor(delta, requires_grad=True)
    with ag.frozen(pipeline.model.parameters()):
        loss = pipeline.objective(x, d, _labels_for(config, labels), indices, targeted=config.targeted)
        ag.backward(ag.tsum(loss))
    return d.grad if d.grad is not None else np.zeros_like(delta)


def _prepare(x, labels, indices):
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(x):
        raise ValueError(f"{len(labels)} labels for {len(x)} images")
    idx = list(range(len(x))) if indices is None else [int(i) for i in indices]
    return x, labels, idx


def _start(pipeline, x, labels, idx, config, delta0):
    report = AttackReport(config, pipeline.mode, labels, idx)
    report.record(pipeline.evaluate(x, delta0, labels, idx), delta0, x)
    return report


def _finish(report: AttackReport, delta: np.ndarray, t0: float):
    report.delta = delta
    report.seconds = time.perf_counter() - t0
    return delta, report


# ---------------------------------------------------------------- attacks
def fgsm(pipeline, x, labels, config: AttackConfig, indices=None) -> tuple[np.ndarray, AttackReport]:
    """δ = ε·sign(∇L), then clipped so that x + δ stays a valid image."""
    t0 = time.perf_counter()
    x, labels, idx = _prepare(x, labels, indices)
    eps = config.epsilon
    delta = np.zeros_like(x)
    report = _start(pipeline, x, labels, idx, config, delta)
    if eps > 0:
        g = gradient(pipeline, x, delta, labels, idx, config)
        delta = project(eps * sign(g), x, eps)
    report.record(pipeline.evaluate(x, delta, labels, idx), delta, x)
    return _finish(report, delta, t0)


def pgd(pipeline, x, labels, config: AttackConfig, indices=None) -> tuple[np.ndarray, AttackReport]:
    """Projected sign-gradient ascent with optional uniform random start."""
    t0 = time.perf_counter()
    x, labels, idx = _prepare(x, labels, indices)
    eps = config.epsilon
    if config.random_init and eps > 0:
        delta = random_init(x, eps, config.seed, idx)
    else:
        delta = np.zeros_like(x)
    report = _start(pipeline, x, labels, idx, config, delta)
    for _ in range(config.steps):
        g = gradient(pipeline, x, delta, labels, idx, config)
        delta = project(delta + np.float32(config.step_size) * sign(g), x, eps)
        report.record(pipeline.evaluate(x, delta, labels, idx), delta, x)
    return _finish(report, delta, t0)


def adam_attack(pipeline, x, labels, config: AttackConfig, indices=None) -> tuple[np.ndarray, AttackReport]:
    """Adam ascent on δ with projection after each step; ``epsilon=None`` is unbounded."""
    t0 = time.perf_counter()
    x, labels, idx = _prepare(x, labels, indices)
    eps = config.epsilon
    if config.random_init and eps:
        delta = random_init(x, eps, config.seed, idx)
    else:
        delta = np.zeros_like(x)
    m = np.zeros(x.shape, dtype=np.float64)
    v = np.zeros(x.shape, dtype=np.float64)
    report = _start(pipeline, x, labels, idx, config, delta)
    for t in range(1, config.steps + 1):
        g = gradient(pipeline, x, delta, labels, idx, config).astype(np.float64)
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1**t)
        v_hat = v / (1 - config.beta2**t)
        step = config.step_size * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        delta = project((delta + step).astype(np.float32), x, eps)
        report.record(pipeline.evaluate(x, delta, labels, idx), delta, x)
    return _finish(report, delta, t0)


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "adam": adam_attack}


def run_attack(pipeline, x, labels, config: AttackConfig, indices=None) -> tuple[np.ndarray, AttackReport]:
    return ATTACKS[config.algorithm](pipeline, x, labels, config, indices)
