"""Learnable distribution over composed stochastic augmentation blocks.

A distribution is an ordered list of K blocks. Block i fires with
probability pi_i; when it fires, a continuous block draws its transform
parameter a = alpha_i * eps with eps ~ U[-1, 1], while a discrete block
draws an index uniformly over its support (which always contains the
identity outcome). A sampled composite transform is the ordered product
of the fired blocks' affine matrices, plus an optional crop offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import warp

CONTINUOUS = "continuous"
DISCRETE = "discrete"

ROTATION = "rotation"
SCALE_X = "scale-x"
SCALE_Y = "scale-y"
SHEAR_X = "shear-x"
ROT180 = "rot180"
HFLIP = "hflip"
CROP = "crop"

#: Families whose action is a 3x3 affine matrix (everything except crop).
AFFINE_FAMILIES = (ROTATION, SCALE_X, SCALE_Y, SHEAR_X, ROT180, HFLIP)

#: Padding used by the crop block; the offset support is (2*pad+1)^2 cells.
CROP_PAD = 4

#: Lower clamp for range parameters. alpha = 0 would make the prior KL
#: term log(a_max / alpha) diverge, so alpha is never clamped below this.
ALPHA_FLOOR = 1e-4

#: Full ranges A_i per continuous family: rotation covers half a turn in
#: either direction, scale/shear cover log-factor / shear-factor 1.
DEFAULT_A_MAX = {ROTATION: math.pi, SCALE_X: 1.0, SCALE_Y: 1.0, SHEAR_X: 1.0}


@dataclass(frozen=True)
class AugBlock:
    """One stochastic transform block."""

    family: str
    kind: str
    pi: float
    alpha: float | None = None
    a_max: float | None = None
    n_support: int | None = None

    def validate(self) -> None:
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown block kind: {self.kind!r}")
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"pi={self.pi} outside [0, 1] for {self.family}")
        if self.kind == CONTINUOUS:
            if self.alpha is None or self.a_max is None:
                raise ValueError(f"continuous block {self.family} needs alpha and a_max")
            if not 0.0 < self.alpha <= self.a_max:
                raise ValueError(
                    f"alpha={self.alpha} outside (0, {self.a_max}] for {self.family}"
                )
            if self.n_support is not None:
                raise ValueError(f"continuous block {self.family} must not set n_support")
        else:
            if self.n_support is None or self.n_support < 2:
                raise ValueError(f"discrete block {self.family} needs n_support >= 2")
            if self.alpha is not None or self.a_max is not None:
                raise ValueError(f"discrete block {self.family} must not set alpha/a_max")


@dataclass(frozen=True)
class AugDistribution:
    """Ordered composition of blocks; continuous blocks come first."""

    blocks: tuple[AugBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def k_parametric(self) -> int:
        return sum(1 for b in self.blocks if b.kind == CONTINUOUS)

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(b.family for b in self.blocks)

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError("distribution needs at least one block")
        for b in self.blocks:
            b.validate()
        kinds = [b.kind for b in self.blocks]
        if kinds != sorted(kinds):  # CONTINUOUS < DISCRETE lexically
            raise ValueError("continuous blocks must precede discrete blocks")

    def pis(self) -> np.ndarray:
        return np.array([b.pi for b in self.blocks], dtype=np.float64)

    def alphas(self) -> np.ndarray:
        return np.array(
            [b.alpha for b in self.blocks if b.kind == CONTINUOUS], dtype=np.float64
        )

    def with_params(self, pis, alphas) -> "AugDistribution":
        """Copy with replaced pi (length K) and alpha (length k) vectors."""
        pis = np.asarray(pis, dtype=np.float64)
        alphas = np.asarray(alphas, dtype=np.float64)
        out, ci = [], 0
        for i, b in enumerate(self.blocks):
            if b.kind == CONTINUOUS:
                out.append(replace(b, pi=float(pis[i]), alpha=float(alphas[ci])))
                ci += 1
            else:
                out.append(replace(b, pi=float(pis[i])))
        return AugDistribution(tuple(out))

    def to_dict(self) -> dict:
        out = []
        for b in self.blocks:
            d = {"family": b.family, "kind": b.kind, "pi": b.pi}
            if b.kind == CONTINUOUS:
                d["alpha"] = b.alpha
                d["a_max"] = b.a_max
            else:
                d["n_support"] = b.n_support
            out.append(d)
        return {"blocks": out}

    @staticmethod
    def from_dict(d: dict) -> "AugDistribution":
        blocks = []
        for bd in d["blocks"]:
            extra = set(bd) - {"family", "kind", "pi", "alpha", "a_max", "n_support"}
            if extra:
                raise ValueError(f"unknown block keys: {sorted(extra)}")
            blocks.append(AugBlock(**bd))
        dist = AugDistribution(tuple(blocks))
        dist.validate()
        return dist


@dataclass(frozen=True)
class SampledTransform:
    """One realized composite transform.

    ``draws`` holds the raw per-block draw whether or not the block fired
    (continuous: eps in [-1, 1]; discrete: support index). ``matrix`` is
    the ordered product of the fired affine blocks' matrices, identity if
    none fired. ``crop_offset`` is set only when a crop block fired.
    """

    applied: np.ndarray
    draws: np.ndarray
    matrix: np.ndarray
    crop_offset: tuple[int, int] | None = None


def default_distribution() -> AugDistribution:
    """Seven-block composition: rotation, scale-x/y, shear-x (continuous),
    180-degree rotation, horizontal flip, crop (discrete).

    All pi start at 1/7 and all alpha at 0.1.
    """
    k = 7
    pi0, alpha0 = 1.0 / k, 0.1
    cont = tuple(
        AugBlock(f, CONTINUOUS, pi0, alpha=alpha0, a_max=DEFAULT_A_MAX[f])
        for f in (ROTATION, SCALE_X, SCALE_Y, SHEAR_X)
    )
    disc = (
        AugBlock(ROT180, DISCRETE, pi0, n_support=2),
        AugBlock(HFLIP, DISCRETE, pi0, n_support=2),
        AugBlock(CROP, DISCRETE, pi0, n_support=(2 * CROP_PAD + 1) ** 2),
    )
    dist = AugDistribution(cont + disc)
    dist.validate()
    return dist


def crop_offset_from_index(index: int, n_support: int) -> tuple[int, int]:
    """Map a support index to an (dx, dy) offset in the padded window."""
    side = int(round(math.sqrt(n_support)))
    if side * side != n_support:
        raise ValueError(f"crop n_support={n_support} is not a perfect square")
    pad = (side - 1) // 2
    return int(index % side) - pad, int(index // side) - pad


def block_param(block: AugBlock, draw: float) -> float:
    """Affine parameter a for a fired block given its raw draw."""
    if block.kind == CONTINUOUS:
        return block.alpha * draw
    if block.family == ROT180:
        return math.pi if int(draw) == 1 else 0.0
    if block.family == HFLIP:
        return -1.0 if int(draw) == 1 else 1.0
    raise ValueError(f"block {block.family} has no affine parameter")


def compose_transform(dist: AugDistribution, applied, draws) -> SampledTransform:
    """Build the composite transform from per-block flags and raw draws."""
    applied = np.asarray(applied, dtype=bool)
    draws = np.asarray(draws, dtype=np.float64)
    matrix = np.eye(3)
    crop = None
    for i, b in enumerate(dist.blocks):
        if not applied[i]:
            continue
        if b.family == CROP:
            crop = crop_offset_from_index(int(draws[i]), b.n_support)
        else:
            matrix = matrix @ warp.affine_matrix(b.family, block_param(b, draws[i]))
    return SampledTransform(applied=applied, draws=draws, matrix=matrix, crop_offset=crop)


def sample_block(block: AugBlock, rng: np.random.Generator) -> tuple[bool, float]:
    """Draw (fired, raw draw) for one block.

    The raw draw is consumed from the stream regardless of whether the
    block fired, so the stream layout does not depend on the pi values.
    """
    fired = bool(rng.random() < block.pi)
    if block.kind == CONTINUOUS:
        draw = float(rng.uniform(-1.0, 1.0))
    else:
        draw = float(rng.integers(block.n_support))
    return fired, draw


def sample_transform(dist: AugDistribution, rng: np.random.Generator) -> SampledTransform:
    """Draw one composite transform; deterministic given the generator state."""
    applied = np.empty(dist.k, dtype=bool)
    draws = np.empty(dist.k, dtype=np.float64)
    for i, b in enumerate(dist.blocks):
        applied[i], draws[i] = sample_block(b, rng)
    return compose_transform(dist, applied, draws)


def composed_matrix_derivative(
    dist: AugDistribution, st: SampledTransform, s: int
) -> np.ndarray:
    """d(matrix)/d a_s: prefix @ dM_s/da @ suffix over the fired affine blocks.

    Zero matrix when block s did not fire (no parameter entered the product).
    """
    block = dist.blocks[s]
    if block.kind != CONTINUOUS:
        raise ValueError(f"block {block.family} has no range parameter")
    if not st.applied[s]:
        return np.zeros((3, 3))
    out = np.eye(3)
    for i, b in enumerate(dist.blocks):
        if not st.applied[i] or b.family == CROP:
            continue
        if i == s:
            out = out @ warp.affine_matrix_derivative(b.family, block_param(b, st.draws[i]))
        else:
            out = out @ warp.affine_matrix(b.family, block_param(b, st.draws[i]))
    return out


def clamp_distribution(
    dist: AugDistribution, c: float, alpha_floor: float = ALPHA_FLOOR
) -> AugDistribution:
    """Project every pi into [c, 1-c] and every alpha into [alpha_floor, a_max]."""
    if not 0.0 <= c < 0.5:
        raise ValueError(f"clamp constant c={c} outside [0, 0.5)")
    pis = np.clip(dist.pis(), c, 1.0 - c)
    alphas = np.array(
        [
            min(max(b.alpha, alpha_floor), b.a_max)
            for b in dist.blocks
            if b.kind == CONTINUOUS
        ]
    )
    return dist.with_params(pis, alphas)


def trajectory_rows(dist: AugDistribution, epoch: int) -> list[tuple]:
    """Per-epoch CSV rows (epoch, family, pi, alpha); alpha blank for discrete."""
    rows = []
    for b in dist.blocks:
        rows.append((epoch, b.family, b.pi, b.alpha if b.kind == CONTINUOUS else ""))
    return rows


def apply_transforms(x, transforms, pad: int = CROP_PAD) -> np.ndarray:
    """Apply transforms[i] to x[i].

    Image batches (n, c, h, w) are cropped first (the crop block sits last
    in the composition, hence acts on the raw input) and then warped once
    with the composed matrix. Two-column feature batches (n, 2) are acted
    on directly by the 2x2 matrix block; crops do not apply there.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if len(transforms) != n:
        raise ValueError(f"{len(transforms)} transforms for batch of {n}")
    matrices = np.stack([st.matrix for st in transforms])
    if x.ndim == 2:
        if any(st.crop_offset is not None for st in transforms):
            raise ValueError("crop block cannot act on feature vectors")
        return warp.transform_features(x, matrices)
    cropped = np.empty_like(x)
    for i, st in enumerate(transforms):
        if st.crop_offset is None:
            cropped[i] = x[i]
        else:
            cropped[i] = warp.apply_crop(x[i : i + 1], pad, st.crop_offset)[0]
    return warp.warp_bilinear(cropped, matrices)
