"""Image augmentations applied to stacked-frame observations.

Observations are (C, H, W) float arrays in [0, 1] where C bundles K
stacked RGB frames (C = 3K).  One augmentation draw is shared by all K
frames of an observation (temporal consistency); across a batch every
sample gets its own draw.  All outputs are clamped to [0, 1].

Distractor images for the blending augmentations come from a procedural
bank (color gradients, smoothed noise, checkerboards) that is a pure
function of its seed, so runs are reproducible without any external
dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import StructuralError

IDENTITY = "identity"
RANDOM_SHIFT = "random_shift"
RANDOM_CONV = "random_conv"
CUTOUT = "cutout"
MIXUP = "mixup"
OVERLAY = "overlay"
OVERLAY_S = "overlay_s"

KINDS = (IDENTITY, RANDOM_SHIFT, RANDOM_CONV, CUTOUT, MIXUP, OVERLAY, OVERLAY_S)

OVERLAY_S_LIMIT = 0.20  # blends below this strength count as the soft variant


@dataclass(frozen=True)
class AugmentationSpec:
    """One parameterized transformation; ``kind`` selects the behaviour.

    pad          random_shift: replicate-pad width before the re-crop
    kernel_size  random_conv: square kernel edge (odd)
    box_fraction cutout: zeroed box edge as a fraction of H and W
    mix          mixup: weight kept on the observation
    strength     overlay / overlay_s: weight given to the distractor
    """

    kind: str
    pad: int = 2
    kernel_size: int = 3
    box_fraction: float = 0.4
    mix: float = 0.5
    strength: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == RANDOM_SHIFT and self.pad < 0:
            raise StructuralError("random_shift pad must be >= 0")
        if self.kind == RANDOM_CONV and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            raise StructuralError("random_conv kernel size must be odd and positive")
        if self.kind == CUTOUT and not 0.0 < self.box_fraction < 1.0:
            raise StructuralError("cutout box fraction must lie in (0, 1)")
        if self.kind == MIXUP and not 0.0 <= self.mix <= 1.0:
            raise StructuralError("mixup coefficient must lie in [0, 1]")
        if self.kind == OVERLAY and not 0.0 <= self.strength < 1.0:
            raise StructuralError("overlay strength must lie in [0, 1)")
        if self.kind == OVERLAY_S and not 0.0 <= self.strength < OVERLAY_S_LIMIT:
            raise StructuralError(
                f"overlay_s strength must lie in [0, {OVERLAY_S_LIMIT})"
            )

    def label(self) -> str:
        param = {
            RANDOM_SHIFT: f"pad={self.pad}",
            RANDOM_CONV: f"kernel_size={self.kernel_size}",
            CUTOUT: f"box_fraction={self.box_fraction:g}",
            MIXUP: f"mix={self.mix:g}",
            OVERLAY: f"strength={self.strength:g}",
            OVERLAY_S: f"strength={self.strength:g}",
        }.get(self.kind)
        return self.kind if param is None else f"{self.kind}({param})"


def identity() -> AugmentationSpec:
    return AugmentationSpec(IDENTITY)


def random_shift(pad: int = 2) -> AugmentationSpec:
    return AugmentationSpec(RANDOM_SHIFT, pad=pad)


def random_conv(kernel_size: int = 3) -> AugmentationSpec:
    return AugmentationSpec(RANDOM_CONV, kernel_size=kernel_size)


def cutout(box_fraction: float = 0.4) -> AugmentationSpec:
    return AugmentationSpec(CUTOUT, box_fraction=box_fraction)


def mixup(mix: float = 0.5) -> AugmentationSpec:
    return AugmentationSpec(MIXUP, mix=mix)


def overlay_spec(strength: float = 0.5) -> AugmentationSpec:
    return AugmentationSpec(OVERLAY, strength=strength)


def overlay_s_spec(strength: float = 0.15) -> AugmentationSpec:
    return AugmentationSpec(OVERLAY_S, strength=strength)


class DistractorBank:
    """Procedural stand-in for a natural-image distractor dataset.

    ``images`` has shape (count, 3, height, width) with values in [0, 1]
    and is fully determined by the constructor arguments.  Indices cycle
    through three pattern families: linear color gradients, smoothed
    noise, checkerboards.
    """

    def __init__(self, seed: int, count: int = 64, height: int = 24, width: int = 24):
        if count < 1:
            raise StructuralError("bank needs at least one image")
        self.seed = seed
        rng = np.random.default_rng(seed)
        images = np.empty((count, 3, height, width), dtype=np.float32)
        for i in range(count):
            family = i % 3
            if family == 0:
                images[i] = _gradient_image(rng, height, width)
            elif family == 1:
                images[i] = _smooth_noise_image(rng, height, width)
            else:
                images[i] = _checker_image(rng, height, width)
        self.images = images

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def _gradient_image(rng, h, w):
    c0 = rng.uniform(0.0, 1.0, size=3)
    c1 = rng.uniform(0.0, 1.0, size=3)
    direction = rng.integers(0, 3)
    if direction == 0:
        t = np.linspace(0.0, 1.0, w)[None, :] * np.ones((h, 1))
    elif direction == 1:
        t = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    else:
        t = (np.add.outer(np.arange(h), np.arange(w)) / (h + w - 2.0))
    return (c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]).astype(np.float32)


def _smooth_noise_image(rng, h, w):
    grid = rng.uniform(0.0, 1.0, size=(3, 5, 5))
    return _bilinear_upsample(grid, h, w).astype(np.float32)


def _checker_image(rng, h, w):
    c0 = rng.uniform(0.0, 1.0, size=3)
    c1 = rng.uniform(0.0, 1.0, size=3)
    cell = int(rng.integers(2, 7))
    pattern = ((np.add.outer(np.arange(h) // cell, np.arange(w) // cell)) % 2).astype(np.float32)
    return (c0[:, None, None] * (1 - pattern) + c1[:, None, None] * pattern).astype(np.float32)


def _bilinear_upsample(grid, h, w):
    gh, gw = grid.shape[1:]
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[:, y0][:, :, x0] * (1 - fx) + grid[:, y0][:, :, x1] * fx
    bottom = grid[:, y1][:, :, x0] * (1 - fx) + grid[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


def _tile_to_frames(eps: np.ndarray, channels: int) -> np.ndarray:
    """Repeat a (…, 3, H, W) distractor across the K stacked frames."""
    if channels % eps.shape[-3] != 0:
        raise StructuralError(
            f"observation channels {channels} not a multiple of distractor channels"
        )
    reps = channels // eps.shape[-3]
    return np.tile(eps, (1,) * (eps.ndim - 3) + (reps, 1, 1))


def overlay(obs: np.ndarray, distractor: np.ndarray, mu: float, literal: bool = False) -> np.ndarray:
    """Blend a distractor image into an observation.

    Default is the convex blend (1-mu)*obs + mu*distractor.  ``literal``
    switches to (1-mu)*obs + distractor, which can leave [0, 1] before
    the clamp and makes mu=0 non-neutral; it exists for fidelity
    experiments only.
    """
    if not 0.0 <= mu < 1.0:
        raise StructuralError(f"overlay coefficient must lie in [0, 1), got {mu}")
    obs = np.asarray(obs)
    distractor = np.asarray(distractor, dtype=obs.dtype)
    if distractor.shape[-2:] != obs.shape[-2:]:
        raise StructuralError(
            f"distractor spatial shape {distractor.shape} does not match observation {obs.shape}"
        )
    eps = _tile_to_frames(distractor[None], obs.shape[-3])[0]
    if literal:
        out = (1.0 - mu) * obs + eps
    else:
        out = (1.0 - mu) * obs + mu * eps
    return np.clip(out, 0.0, 1.0)


def batch_apply(
    batch: np.ndarray,
    spec: AugmentationSpec,
    bank: DistractorBank | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Apply one augmentation to a (B, C, H, W) batch, one draw per sample."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise StructuralError(f"expected (B, C, H, W) batch, got shape {batch.shape}")
    b, c, h, w = batch.shape

    if spec.kind == IDENTITY:
        return batch

    if spec.kind == RANDOM_SHIFT:
        p = spec.pad
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
        offsets = rng.integers(0, 2 * p + 1, size=(b, 2))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (h, w), axis=(2, 3))
        return np.ascontiguousarray(windows[np.arange(b), :, offsets[:, 0], offsets[:, 1]])

    if spec.kind == RANDOM_CONV:
        k = spec.kernel_size
        kernels = rng.uniform(-1.0, 1.0, size=(b, k, k)).astype(batch.dtype)
        p = k // 2
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
        # one shared kernel per sample: accumulate the k*k shifted views
        out = np.zeros_like(batch)
        for i in range(k):
            for j in range(k):
                out += kernels[:, i, j, None, None, None] * padded[:, :, i : i + h, j : j + w]
        lo = out.min(axis=(1, 2, 3), keepdims=True)
        hi = out.max(axis=(1, 2, 3), keepdims=True)
        span = hi - lo
        flat = span.reshape(b) <= 1e-12
        span[span <= 1e-12] = 1.0
        out = (out - lo) / span
        if flat.any():
            out[flat] = 0.0
        return out.astype(batch.dtype, copy=False)

    if spec.kind == CUTOUT:
        bh = int(spec.box_fraction * h)
        bw = int(spec.box_fraction * w)
        y0 = rng.integers(0, h - bh + 1, size=b)
        x0 = rng.integers(0, w - bw + 1, size=b)
        rows = (np.arange(h)[None, :] >= y0[:, None]) & (np.arange(h)[None, :] < (y0 + bh)[:, None])
        cols = (np.arange(w)[None, :] >= x0[:, None]) & (np.arange(w)[None, :] < (x0 + bw)[:, None])
        box = rows[:, None, :, None] & cols[:, None, None, :]
        return np.where(box, batch.dtype.type(0.0), batch)

    # remaining kinds blend with a bank image
    if bank is None:
        raise StructuralError(f"{spec.kind} requires a distractor bank")
    if bank.image_shape[1:] != (h, w):
        raise StructuralError(
            f"bank image shape {bank.image_shape} does not match observations ({h}, {w})"
        )
    idx = rng.integers(0, bank.count, size=b)
    eps = bank.images[idx].astype(batch.dtype, copy=False)
    keep = spec.mix if spec.kind == MIXUP else 1.0 - spec.strength
    # blend per frame so the (B, 3, H, W) distractor broadcasts without tiling
    frames = batch.reshape(b, c // 3, 3, h, w)
    out = keep * frames + (1.0 - keep) * eps[:, None]
    return np.clip(out, 0.0, 1.0).reshape(b, c, h, w).astype(batch.dtype, copy=False)


def apply(
    obs: np.ndarray,
    spec: AugmentationSpec,
    bank: DistractorBank | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Augment a single (C, H, W) observation."""
    obs = np.asarray(obs)
    if obs.ndim != 3:
        raise StructuralError(f"expected (C, H, W) observation, got shape {obs.shape}")
    return batch_apply(obs[None], spec, bank, rng)[0]


def make_combination(specs: Sequence[AugmentationSpec]) -> tuple[AugmentationSpec, ...]:
    """Build the ordered combination; identity always sits at index 0.

    The input may start with an explicit identity; any identity beyond
    index 0 is a duplicate and rejected.  The returned tuple has N+1
    members where N is the number of proper augmentations.
    """
    specs = list(specs)
    if not specs:
        raise StructuralError("combination needs at least one augmentation spec")
    if specs[0].kind == IDENTITY:
        rest = specs[1:]
    else:
        rest = specs
    if any(s.kind == IDENTITY for s in rest):
        raise StructuralError("identity may appear only once, at index 0")
    return (identity(),) + tuple(rest)


def default_combination() -> tuple[AugmentationSpec, ...]:
    """The training default: conv scramble plus hard and soft overlays."""
    return make_combination([random_conv(3), overlay_spec(0.5), overlay_s_spec(0.15)])


def analysis_combination() -> tuple[AugmentationSpec, ...]:
    """The five-member set used for the gradient-pitfall analysis."""
    return make_combination([random_shift(2), random_conv(3), cutout(0.4), mixup(0.5)])
