"""Experiment orchestration: configs, attack sweeps and report files.

A run is a pure function of its config: datasets come from their own seeds,
and the global ``seed`` drives the distortion chains, training and attack
initialisation. CSV outputs are byte-identical across runs of one config;
wall-clock timings live only in ``run.json``.

Output layout of an experiment directory::

    summary.csv                 one row per cell, benign rows first
    curves/<cell>.csv           batch means per iteration
    curves/<cell>_images.csv    the same per image (image, iter, ...)
    deltas/<cell>.stt           final perturbations, STT1 tensor
    inputs.stt                  the clean inputs the deltas apply to
    images/<cell>/...ppm        adversarial images for inspection
    plots/loss_eps<e>.svg       loss curves per budget
    run.json                    resolved config, chain constants, thresholds
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from . import autograd as ag
from .attacks import AttackConfig, AttackReport, run_attack
from .dataset import (
    Scene,
    generate_classification_set,
    generate_scene_set,
    stack_images,
    write_ppm,
)
from .distortion import DistortionChain, billboard_homography, chain_from_spec
from .model import ClassifierModel, ModelError, TrainConfig, TrainReport, load_weights, train
from .render import nearest_composite
from .ste import GlobalStePipeline, PatchStePipeline

OUT_ENV = "STEPHYS_OUT"
EPSILONS_255 = (2, 4, 8, 16)


class HarnessError(RuntimeError):
    """A run cannot start or finish; ``kind`` names the failure class."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ----------------------------------------------------------------- config
@dataclass(frozen=True)
class SetSpec:
    seed: int
    count: int


@dataclass(frozen=True)
class DataSpec:
    classes: int = 4
    train: SetSpec = SetSpec(7, 4000)
    test: SetSpec = SetSpec(1007, 50)
    scene_train: SetSpec = SetSpec(5, 2000)
    scenes: SetSpec = SetSpec(3, 20)


@dataclass(frozen=True)
class Cell:
    """One attack of a sweep: an attack config plus whether it sees the chain."""

    attack: AttackConfig
    ste: bool

    @property
    def name(self) -> str:
        return self.attack.name

    @property
    def key(self) -> str:
        eps = self.attack.epsilon_255.replace(".", "p")
        return f"{self.name.replace('.', 'p')}_eps{eps}_{'ste' if self.ste else 'nonste'}"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: Path = Path("runs/default")
    data: DataSpec = field(default_factory=DataSpec)
    model: Path = Path("models/classifier.stw")
    scene_model: Path = Path("models/scene.stw")
    train: TrainConfig = field(default_factory=TrainConfig)
    chain: Any = "global"
    patch_chain: Any = "patch"
    global_attacks: tuple[Cell, ...] = ()
    patch_attacks: tuple[Cell, ...] = ()

    def __post_init__(self):
        if not self.global_attacks:
            object.__setattr__(self, "global_attacks", default_global_grid(self.seed))
        if not self.patch_attacks:
            object.__setattr__(self, "patch_attacks", default_patch_grid(self.seed))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cells = lambda cs: tuple(replace(c, attack=replace(c.attack, seed=seed)) for c in cs)  # noqa: E731
        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed),
            global_attacks=cells(self.global_attacks),
            patch_attacks=cells(self.patch_attacks),
        )

    def global_chain(self) -> DistortionChain:
        return chain_from_spec(self.chain, self.seed)

    def scene_chain(self) -> DistortionChain:
        return chain_from_spec(self.patch_chain, self.seed)

    def to_dict(self) -> dict:
        def cell(c: Cell) -> dict:
            a = c.attack
            return {
                "algorithm": a.algorithm,
                "epsilon": None if a.epsilon is None else float(a.epsilon_255),
                "steps": a.steps,
                "step_size": float(_fmt255(a.step_size)),
                "ste": c.ste,
                "random_init": a.random_init,
            }

        return {
            "seed": self.seed,
            "out": str(self.out),
            "data": asdict(self.data),
            "model": str(self.model),
            "scene_model": str(self.scene_model),
            "train": {k: v for k, v in asdict(self.train).items() if k != "seed"},
            "chain": self.chain,
            "patch_chain": self.patch_chain,
            "global_attacks": [cell(c) for c in self.global_attacks],
            "patch_attacks": [cell(c) for c in self.patch_attacks],
        }


def _fmt255(value: float) -> str:
    return f"{value * 255:.6g}"


def default_global_grid(seed: int = 0) -> tuple[Cell, ...]:
    """FGSM and PGD-12-1 at each budget, with and without the STE."""
    cells = []
    for e in EPSILONS_255:
        fgsm = AttackConfig("fgsm", e / 255, 1, e / 255, random_init=False, seed=seed)
        pgd = AttackConfig("pgd", e / 255, 12, 1 / 255, random_init=True, seed=seed)
        for attack in (fgsm, pgd):
            cells += [Cell(attack, True), Cell(attack, False)]
    return tuple(cells)


def default_patch_grid(seed: int = 0) -> tuple[Cell, ...]:
    """STE-bounded Adam at 2, 4, 8; unbounded Adam with and without the STE."""
    adam = lambda eps, steps, lr: AttackConfig("adam", eps, steps, lr / 255, seed=seed)  # noqa: E731
    return (
        Cell(adam(2 / 255, 200, 1), True),
        Cell(adam(4 / 255, 200, 2), True),
        Cell(adam(8 / 255, 200, 2), True),
        Cell(adam(None, 500, 12.75), True),
        Cell(adam(None, 500, 12.75), False),
    )


def _set_spec(raw: Any, default: SetSpec, where: str) -> SetSpec:
    if raw is None:
        return default
    if not isinstance(raw, dict) or set(raw) - {"seed", "count"}:
        raise HarnessError("config", f"{where} must be a mapping with 'seed' and 'count'")
    spec = SetSpec(int(raw.get("seed", default.seed)), int(raw.get("count", default.count)))
    if spec.count < 1:
        raise HarnessError("config", f"{where}.count must be >= 1")
    return spec


def _budget(raw: Any, where: str) -> float | None:
    """Budgets and step sizes are written in 1/255 units; null or 'inf' is unbounded."""
    if raw is None or (isinstance(raw, str) and raw.lower() in ("inf", "none", "unbounded")):
        return None
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise HarnessError("config", f"{where}: expected a number in 1/255 units, got {raw!r}") from None
    return None if math.isinf(value) else value / 255


def _cell(raw: dict, seed: int, where: str) -> Cell:
    known = {"algorithm", "epsilon", "steps", "step_size", "ste", "random_init", "targeted", "target_label"}
    if not isinstance(raw, dict):
        raise HarnessError("config", f"{where} must be a mapping")
    unknown = set(raw) - known
    if unknown:
        raise HarnessError("config", f"{where}: unknown keys {sorted(unknown)}")
    algorithm = str(raw.get("algorithm", "pgd")).lower()
    eps = _budget(raw.get("epsilon", 8), f"{where}.epsilon")
    steps = int(raw.get("steps", 1 if algorithm == "fgsm" else 12))
    default_step = raw.get("epsilon", 8) if algorithm == "fgsm" else 1
    step = _budget(raw.get("step_size", default_step), f"{where}.step_size")
    try:
        attack = AttackConfig(
            algorithm,
            eps,
            steps,
            0.0 if step is None else step,
            random_init=bool(raw.get("random_init", algorithm != "fgsm")),
            targeted=bool(raw.get("targeted", False)),
            target_label=raw.get("target_label"),
            seed=seed,
        )
    except ValueError as exc:
        raise HarnessError("config", f"{where}: {exc}") from None
    return Cell(attack, bool(raw.get("ste", True)))


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build a config from parsed YAML; relative paths resolve against ``base_dir``."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise HarnessError("config", "config file must hold a mapping at top level")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise HarnessError("config", f"unknown config keys {sorted(unknown)}")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    seed = int(raw.get("seed", 0))
    data_raw = raw.get("data")
    data_raw = {} if data_raw is None else data_raw
    if not isinstance(data_raw, dict):
        raise HarnessError("config", "data must be a mapping")
    d = DataSpec()
    data = DataSpec(
        classes=int(data_raw.get("classes", d.classes)),
        train=_set_spec(data_raw.get("train"), d.train, "data.train"),
        test=_set_spec(data_raw.get("test"), d.test, "data.test"),
        scene_train=_set_spec(data_raw.get("scene_train"), d.scene_train, "data.scene_train"),
        scenes=_set_spec(data_raw.get("scenes"), d.scenes, "data.scenes"),
    )
    if not 2 <= data.classes <= 16:
        raise HarnessError("config", "data.classes must be in [2, 16]")
    train_raw = raw.get("train")
    train_raw = {} if train_raw is None else train_raw
    if not isinstance(train_raw, dict):
        raise HarnessError("config", "train must be a mapping")
    try:
        train_cfg = TrainConfig(**{**train_raw, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise HarnessError("config", f"train: {exc}") from None

    def path(key: str, default: Path) -> Path:
        p = Path(raw.get(key, default))
        return p if p.is_absolute() else base / p

    def cells(key: str) -> tuple[Cell, ...]:
        items = raw.get(key)
        if items is None:
            return ()
        if not isinstance(items, list) or not items:
            raise HarnessError("config", f"{key} must be a non-empty list")
        return tuple(_cell(item, seed, f"{key}[{i}]") for i, item in enumerate(items))

    cfg = ExperimentConfig(
        seed=seed,
        out=path("out", ExperimentConfig.out),
        data=data,
        model=path("model", ExperimentConfig.model),
        scene_model=path("scene_model", ExperimentConfig.scene_model),
        train=train_cfg,
        chain=raw.get("chain", "global"),
        patch_chain=raw.get("patch_chain", "patch"),
        global_attacks=cells("global_attacks"),
        patch_attacks=cells("patch_attacks"),
    )
    for key in ("chain", "patch_chain"):
        try:
            chain_from_spec(getattr(cfg, key), seed)
        except (TypeError, ValueError) as exc:
            raise HarnessError("config", f"{key}: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise HarnessError("config", f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise HarnessError("config", f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw, path.parent)


def resolve_out(config: ExperimentConfig, cli_out: str | Path | None = None) -> Path:
    """``--out`` beats the environment variable, which beats the config file."""
    if cli_out is not None:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(config.out)


# ------------------------------------------------------------------- data
def classification_data(config: ExperimentConfig, which: str = "test") -> tuple[np.ndarray, np.ndarray]:
    spec = getattr(config.data, which)
    return stack_images(generate_classification_set(spec.seed, spec.count, config.data.classes))


def scene_data(config: ExperimentConfig, which: str = "scenes") -> list[Scene]:
    spec = getattr(config.data, which)
    return generate_scene_set(spec.seed, spec.count, config.data.classes)


def composite_scenes(scenes: Sequence[Scene], patches: np.ndarray | None = None) -> np.ndarray:
    """Undistorted scenes with each patch pasted in (nearest-neighbour)."""
    out = []
    for i, s in enumerate(scenes):
        patch = s.base_patch if patches is None else patches[i]
        out.append(nearest_composite(patch, s.background, billboard_homography(s)))
    return np.stack(out).astype(np.float32)


def train_classifier(config: ExperimentConfig) -> tuple[ClassifierModel, TrainReport]:
    x, y = classification_data(config, "train")
    model = ClassifierModel(input_shape=x.shape[1:], num_classes=config.data.classes, seed=config.seed)
    return model, train(model, x, y, config.train)


def train_scene_model(config: ExperimentConfig) -> tuple[ClassifierModel, TrainReport]:
    scenes = scene_data(config, "scene_train")
    x = composite_scenes(scenes)
    y = np.array([s.label for s in scenes], dtype=np.int64)
    model = ClassifierModel(input_shape=x.shape[1:], num_classes=config.data.classes, seed=config.seed)
    return model, train(model, x, y, config.train)


def _load_model(path: Path, what: str) -> ClassifierModel:
    if not Path(path).exists():
        raise HarnessError("missing-model", f"{what} weights not found at {path}; run 'stephys train' first")
    try:
        return load_weights(path)
    except ModelError as exc:
        raise HarnessError("bad-model", f"{what} weights at {path}: {exc}") from None


# ---------------------------------------------------------------- results
@dataclass(frozen=True)
class SummaryRow:
    experiment: str  # global | patch
    attack: str
    epsilon_255: str
    ste: str  # yes | no | -
    digital_accuracy: float
    physical_accuracy: float
    metric: str

    def as_csv(self) -> list[str]:
        return [
            self.experiment,
            self.attack,
            self.epsilon_255,
            self.ste,
            f"{self.digital_accuracy:.6f}",
            f"{self.physical_accuracy:.6f}",
            self.metric,
        ]


SUMMARY_COLUMNS = ["experiment", "attack", "epsilon_255", "ste", "digital_accuracy", "physical_accuracy", "metric"]


@dataclass
class CellResult:
    cell: Cell
    report: AttackReport
    row: SummaryRow


@dataclass
class SweepSummary:
    """Accuracies of every cell of one sweep, with the traces behind them."""

    experiment: str
    benign: list[SummaryRow]
    cells: list[CellResult]
    inputs: np.ndarray
    labels: np.ndarray
    chain: DistortionChain
    scenes: list[Scene] | None = None
    model_fingerprint: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def rows(self) -> list[SummaryRow]:
        return self.benign + [c.row for c in self.cells]

    def row(self, attack: str, epsilon_255: str | float, ste: bool | None = None) -> SummaryRow:
        eps = epsilon_255 if isinstance(epsilon_255, str) else f"{epsilon_255:.6g}"
        want = "-" if ste is None else ("yes" if ste else "no")
        for r in self.rows:
            if r.attack == attack and r.epsilon_255 == eps and r.ste == want:
                return r
        raise KeyError((attack, eps, want))

    def cell(self, attack: str, epsilon_255: str | float, ste: bool) -> CellResult:
        eps = epsilon_255 if isinstance(epsilon_255, str) else f"{epsilon_255:.6g}"
        for c in self.cells:
            if c.cell.name == attack and c.cell.attack.epsilon_255 == eps and c.cell.ste == ste:
                return c
        raise KeyError((attack, eps, ste))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            w.writerow(r.as_csv())
        return buf.getvalue()


def _attack_cells(pipeline, x, labels, cells: Iterable[Cell], experiment: str, metric: str) -> list[CellResult]:
    out = []
    for cell in cells:
        _, report = run_attack(pipeline.with_mode("ste" if cell.ste else "digital"), x, labels, cell.attack)
        s = report.summary()
        row = SummaryRow(
            experiment,
            cell.name,
            cell.attack.epsilon_255,
            "yes" if cell.ste else "no",
            s["final_accuracy_digital"],
            s["final_accuracy_physical"],
            metric,
        )
        out.append(CellResult(cell, report, row))
    return out


def run_global_experiment(config: ExperimentConfig, model: ClassifierModel | None = None) -> SweepSummary:
    """Every global cell on the test set, scored digitally and physically."""
    model = model or _load_model(config.model, "classifier")
    x, y = classification_data(config, "test")
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise HarnessError("bad-model", f"classifier expects {model.input_shape}, test images are {x.shape[1:]}")
    chain = config.global_chain()
    pipe = GlobalStePipeline(model, chain, "ste")
    ev = pipe.evaluate(x, np.zeros_like(x), y)
    metric = "classification_accuracy"
    benign = [
        SummaryRow("global", "benign", "0", "-", float(ev.correct_digital.mean()), float(ev.correct_physical.mean()), metric)
    ]
    cells = _attack_cells(pipe, x, y, config.global_attacks, "global", metric)
    return SweepSummary("global", benign, cells, x, y, chain, None, model.fingerprint)


def run_patch_experiment(config: ExperimentConfig, model: ClassifierModel | None = None) -> SweepSummary:
    """Benign, green placeholder and every patch cell on the scene set."""
    model = model or _load_model(config.scene_model, "scene model")
    scenes = scene_data(config, "scenes")
    chain = config.scene_chain()
    pipe = PatchStePipeline(model, chain, scenes, "ste")
    x = pipe.base_patches
    y = np.array([s.label for s in scenes], dtype=np.int64)
    zero = np.zeros_like(x)
    metric = "scene_accuracy"
    benign_ev = pipe.evaluate(x, zero, y)
    green = np.stack([s.placeholder_patch() for s in scenes]).astype(np.float32)
    green_ev = pipe.evaluate(green, zero, y)
    benign = [
        SummaryRow(
            "patch", "benign", "0", "-", float(benign_ev.correct_digital.mean()), float(benign_ev.correct_physical.mean()), metric
        ),
        SummaryRow(
            "patch",
            "green-placeholder",
            "0",
            "-",
            float(green_ev.correct_digital.mean()),
            float(green_ev.correct_physical.mean()),
            metric,
        ),
    ]
    cells = _attack_cells(pipe, x, y, config.patch_attacks, "patch", metric)
    return SweepSummary("patch", benign, cells, x, y, chain, scenes, model.fingerprint)


# ---------------------------------------------------------------- reports
def empirical_threshold(report: AttackReport) -> float | None:
    """Smallest physical loss at which any image first becomes misclassified.

    Each image contributes its physical loss at the first iteration where it
    is physically wrong; the threshold is the minimum over those images.
    ``None`` when no image ever flips.
    """
    correct = report.curve("correct_physical")
    loss = report.curve("loss_physical")
    hits = []
    for i in range(correct.shape[1]):
        wrong = np.flatnonzero(~correct[:, i])
        if wrong.size:
            hits.append(float(loss[wrong[0], i]))
    return min(hits) if hits else None


def _series_sources(summary: SweepSummary) -> dict[str, dict[str, CellResult]]:
    """Per budget, the iterative STE and non-STE cells to plot (most steps wins)."""
    by_eps: dict[str, dict[str, CellResult]] = {}
    for c in summary.cells:
        if c.cell.attack.algorithm == "fgsm":
            continue
        slot = by_eps.setdefault(c.cell.attack.epsilon_255, {})
        side = "ste" if c.cell.ste else "digital"
        if side not in slot or len(c.report) > len(slot[side].report):
            slot[side] = c
    return by_eps


SERIES_COLORS = {"ste": "#d62728", "digital": "#1f77b4", "physical": "#2ca02c"}


def loss_curve_svg(series: dict[str, np.ndarray], title: str, threshold: float | None = None) -> str:
    """A small line plot; one polyline per series, one vertex per iteration."""
    width, height, pad = 480, 300, 40
    values = [v for s in series.values() for v in s] + ([threshold] if threshold is not None else [])
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(s) for s in series.values()), default=1)

    def px(i: int) -> float:
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def py(v: float) -> float:
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{title}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">iteration</text>',
        f'<text x="4" y="{pad - 6}" font-size="11">loss {hi:.3g}</text>',
        f'<text x="4" y="{height - pad + 14}" font-size="11">{lo:.3g}</text>',
    ]
    if threshold is not None:
        y = py(threshold)
        parts.append(
            f'<line class="threshold" x1="{pad}" y1="{y:.2f}" x2="{width - pad}" y2="{y:.2f}" '
            'stroke="#17becf" stroke-dasharray="6,4"/>'
        )
    for k, (name, s) in enumerate(series.items()):
        pts = " ".join(f"{px(i):.2f},{py(float(v)):.2f}" for i, v in enumerate(s))
        colour = SERIES_COLORS.get(name, "#444444")
        parts.append(f'<polyline class="series" data-series="{name}" fill="none" stroke="{colour}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 14 * k}" font-size="11" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _per_image_csv(report: AttackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    body = report.to_csv(0).splitlines()
    w.writerow(["image"] + body[0].split(","))
    for i, idx in enumerate(report.indices):
        for line in report.to_csv(i).splitlines()[1:]:
            w.writerow([idx] + line.split(","))
    return buf.getvalue()


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)


def emit_report(summary: SweepSummary, out_dir: str | Path, config: ExperimentConfig | None = None) -> Path:
    """Write every artefact of a sweep, then re-verify budgets from the files."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise HarnessError("unwritable", f"cannot write to {out}: {exc}") from None

    _write(out / "summary.csv", summary.to_csv())
    ag.save_tensor(out / "inputs.stt", summary.inputs.astype(np.float32))
    thresholds: dict[str, float | None] = {}
    for c in summary.cells:
        _write(out / "curves" / f"{c.cell.key}.csv", c.report.to_csv())
        _write(out / "curves" / f"{c.cell.key}_images.csv", _per_image_csv(c.report))
        (out / "deltas").mkdir(exist_ok=True)
        ag.save_tensor(out / "deltas" / f"{c.cell.key}.stt", c.report.delta.astype(np.float32))
        _write_images(summary, c, out / "images" / c.cell.key)

    for eps, slot in sorted(_series_sources(summary).items(), key=lambda kv: _eps_sort(kv[0])):
        series = {}
        threshold = None
        if "ste" in slot:
            series["ste"] = slot["ste"].report.curve("loss_ste").mean(axis=1)
            threshold = empirical_threshold(slot["ste"].report)
        if "digital" in slot:
            series["digital"] = slot["digital"].report.curve("loss_digital").mean(axis=1)
            series["physical"] = slot["digital"].report.curve("loss_physical").mean(axis=1)
        thresholds[eps] = threshold
        title = f"{summary.experiment} loss, eps={eps}/255"
        _write(out / "plots" / f"loss_eps{eps.replace('.', 'p')}.svg", loss_curve_svg(series, title, threshold))

    meta = {
        "experiment": summary.experiment,
        "model_fingerprint": f"{summary.model_fingerprint:016x}",
        "chain": summary.chain.describe(),
        "empirical_loss_threshold": thresholds,
        "cells": [
            {"key": c.cell.key, **{k: v for k, v in c.report.summary().items() if k != "config"}} for c in summary.cells
        ],
        "rows": [dict(zip(SUMMARY_COLUMNS, r.as_csv())) for r in summary.rows],
        "metric_note": "patch runs report whole-scene classification accuracy, not detection AP"
        if summary.experiment == "patch"
        else "top-1 classification accuracy",
    }
    if config is not None:
        meta["config"] = config.to_dict()
    _write(out / "run.json", json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    verify_outputs(out)
    return out


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _eps_sort(eps: str) -> float:
    return math.inf if eps == "inf" else float(eps)


def _write_images(summary: SweepSummary, c: CellResult, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    adv = np.clip(summary.inputs + c.report.delta, 0.0, 1.0)
    if summary.scenes is None:
        for i, img in enumerate(adv):
            write_ppm(folder / f"adv_{i:03d}.ppm", img)
        return
    shots = composite_scenes(summary.scenes, adv)
    for i, (patch, scene) in enumerate(zip(adv, shots)):
        write_ppm(folder / f"patch_{i:03d}.ppm", patch)
        write_ppm(folder / f"scene_{i:03d}.ppm", scene)


# ------------------------------------------------------------ verification
@dataclass(frozen=True)
class Violation:
    cell: str
    what: str


def read_summary(out_dir: str | Path) -> list[dict[str, str]]:
    path = Path(out_dir) / "summary.csv"
    if not path.exists():
        raise HarnessError("missing-run", f"no summary.csv in {out_dir}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def verify_outputs(out_dir: str | Path, raise_on_error: bool = True) -> list[Violation]:
    """Check every emitted perturbation against its budget, reading only files.

    Checks both the final deltas (``deltas/*.stt`` against ``inputs.stt``) and
    the per-iteration ``linf``/``valid`` columns of every curve CSV.
    """
    out = Path(out_dir)
    inputs = ag.load_tensor(out / "inputs.stt")
    problems: list[Violation] = []
    meta = json.loads((out / "run.json").read_text())
    for cell in meta["cells"]:
        key = cell["key"]
        eps = cell["epsilon_255"]
        bound = math.inf if eps == "inf" else float(np.float32(float(eps) / 255))
        delta = ag.load_tensor(out / "deltas" / f"{key}.stt")
        if delta.shape != inputs.shape:
            problems.append(Violation(key, f"delta shape {delta.shape} != inputs {inputs.shape}"))
            continue
        if float(np.abs(delta).max(initial=0.0)) > bound:
            problems.append(Violation(key, f"final |delta|_inf {np.abs(delta).max():.9g} > {bound:.9g}"))
        adv = inputs.astype(np.float64) + delta
        if adv.min() < -1e-6 or adv.max() > 1 + 1e-6:
            problems.append(Violation(key, "final adversarial image leaves [0, 1]"))
        with open(out / "curves" / f"{key}_images.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                if float(row["linf"]) > bound:
                    problems.append(Violation(key, f"image {row['image']} iter {row['iter']}: linf {row['linf']}"))
                if row["valid"] != "1":
                    problems.append(Violation(key, f"image {row['image']} iter {row['iter']}: invalid image"))
    if problems and raise_on_error:
        raise HarnessError("constraint", "; ".join(f"{p.cell}: {p.what}" for p in problems[:5]))
    return problems


def format_table(rows: Sequence[dict[str, str]]) -> str:
    """Fixed-width text rendering of summary rows."""
    cols = SUMMARY_COLUMNS
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(r[c].ljust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(lines)
