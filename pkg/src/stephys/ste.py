"""Attackable compositions of a model with a non-differentiable imaging pipeline.

Each pipeline runs in one of three modes:

``ste``
    forward through the true distortion, backward as if it were the identity
    (global) or the differentiable renderer (patch).
``digital``
    the attacker's idealised view: no distortion at all.
``physical``
    the tape-free ground truth the attack is scored against.

The straight-through forward value equals the physical one bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataset import Scene
from .distortion import DistortionChain, apply_patch_pipeline, billboard_homography
from .render import Homography, WarpPlan, plan_warp, warp_into

MODES = ("ste", "digital", "physical")


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def _indices(indices, n: int) -> list[int]:
    if indices is None:
        return list(range(n))
    if np.isscalar(indices):
        return [int(indices)]
    out = [int(i) for i in indices]
    if len(out) != n:
        raise ValueError(f"{len(out)} image indices for a batch of {n}")
    return out


@dataclass(frozen=True)
class Evaluation:
    """Per-image losses and correctness of one perturbation under every view."""

    loss_ste: np.ndarray
    loss_digital: np.ndarray
    loss_physical: np.ndarray
    correct_digital: np.ndarray
    correct_physical: np.ndarray
    pred_physical: np.ndarray


class _Pipeline:
    model: object
    mode: str

    def logits(self, x, delta, indices=None, mode: str | None = None) -> Tensor:
        raise NotImplementedError

    def objective(self, x, delta: Tensor, labels, indices=None, targeted: bool = False) -> Tensor:
        """Per-image loss the attacker ascends, in the pipeline's own mode."""
        logits = self.logits(x, delta, indices)
        ce = ag.softmax_cross_entropy(logits, labels, reduction="none")
        return ag.mul(ce, -1.0) if targeted else ce

    def evaluate(self, x, delta: np.ndarray, labels, indices=None) -> Evaluation:
        labels = np.asarray(labels)
        with ag.no_grad():
            ste = self.logits(x, delta, indices, mode="ste").data
            dig = self.logits(x, delta, indices, mode="digital").data
            phy = self.logits(x, delta, indices, mode="physical").data

        def ce(z):
            return ag.softmax_cross_entropy(Tensor(z), labels, reduction="none").data

        return Evaluation(
            loss_ste=ce(ste),
            loss_digital=ce(dig),
            loss_physical=ce(phy),
            correct_digital=dig.argmax(axis=1) == labels,
            correct_physical=phy.argmax(axis=1) == labels,
            pred_physical=phy.argmax(axis=1),
        )


@dataclass
class GlobalStePipeline(_Pipeline):
    """f(d(x + δ)) for ℓ∞ perturbations of the whole image."""

    model: object
    chain: DistortionChain
    mode: str = "ste"

    def __post_init__(self):
        _check_mode(self.mode)

    def with_mode(self, mode: str) -> "GlobalStePipeline":
        return GlobalStePipeline(self.model, self.chain, _check_mode(mode))

    def distort(self, images: np.ndarray, indices) -> np.ndarray:
        idx = _indices(indices, len(images))
        return self.chain.apply_batch(images, idx)

    def logits(self, x, delta, indices=None, mode: str | None = None) -> Tensor:
        mode = _check_mode(mode or self.mode)
        x = np.asarray(x, dtype=np.float32)
        delta = ag.as_tensor(delta)
        if delta.shape != x.shape:
            raise ag.ShapeError("global_forward", x.shape, delta.shape)
        if mode == "physical":
            with ag.no_grad():
                z = np.clip(x + delta.data, 0.0, 1.0)
                return self.model.forward(self.distort(z, indices))
        z = ag.clamp(ag.add(Tensor(x), delta), 0.0, 1.0)
        if mode == "ste":
            z = ag.straight_through(z, self.distort(z.data, indices))
        return self.model.forward(z)


def global_forward(p: GlobalStePipeline, x, delta, index=None) -> Tensor:
    return p.logits(x, delta, index)


@dataclass
class PatchStePipeline(_Pipeline):
    """f(c(p(x + δ), e)) where δ only touches patches rendered into fixed scenes."""

    model: object
    chain: DistortionChain
    scenes: Sequence[Scene]
    mode: str = "ste"
    homographies: list[Homography] = field(init=False)
    plans: list[WarpPlan] = field(init=False, repr=False)

    def __post_init__(self):
        _check_mode(self.mode)
        if isinstance(self.scenes, Scene):
            self.scenes = [self.scenes]
        self.scenes = list(self.scenes)
        self.homographies = [billboard_homography(s) for s in self.scenes]
        self.plans = [
            plan_warp(h, s.base_patch.shape, s.background.shape) for h, s in zip(self.homographies, self.scenes)
        ]
        self.backgrounds = np.stack([s.background for s in self.scenes]).astype(np.float32)

    def with_mode(self, mode: str) -> "PatchStePipeline":
        clone = object.__new__(PatchStePipeline)
        clone.__dict__.update(self.__dict__)
        clone.mode = _check_mode(mode)
        return clone

    @property
    def base_patches(self) -> np.ndarray:
        return np.stack([s.base_patch for s in self.scenes]).astype(np.float32)

    def composite(self, patches: np.ndarray, indices) -> np.ndarray:
        idx = _indices(indices, len(patches))
        return np.stack(
            [
                apply_patch_pipeline(self.chain, s, p, i, h)
                for s, p, i, h in zip(self.scenes, patches, idx, self.homographies)
            ]
        )

    def render(self, patches: Tensor) -> Tensor:
        return warp_into(patches, self.backgrounds, self.plans)

    def logits(self, x, delta, indices=None, mode: str | None = None) -> Tensor:
        mode = _check_mode(mode or self.mode)
        x = np.asarray(x, dtype=np.float32)
        delta = ag.as_tensor(delta)
        if delta.shape != x.shape or x.shape[0] != len(self.scenes):
            raise ag.ShapeError("patch_forward", x.shape, delta.shape)
        if mode == "physical":
            with ag.no_grad():
                z = np.clip(x + delta.data, 0.0, 1.0)
                return self.model.forward(self.composite(z, indices))
        z = ag.clamp(ag.add(Tensor(x), delta), 0.0, 1.0)
        rendered = self.render(z)
        if mode == "ste":
            rendered = ag.straight_through(rendered, self.composite(z.data, indices))
        return self.model.forward(rendered)


def patch_forward(p: PatchStePipeline, delta, index=None, x=None) -> Tensor:
    x = p.base_patches if x is None else x
    return p.logits(x, delta, index)
