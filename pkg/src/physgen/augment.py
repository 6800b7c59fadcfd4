"""Group data augmentation for invariant particle distributions.

Rigid motions (rotation + shared translation of coordinates, rotation of
velocities) and particle relabelings, applied to samples or whole batches.
Rotations are Haar-distributed via QR with the sign fix, then pushed to
det = +1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from physgen.data import TrajectorySample

__all__ = [
    "GroupAugmentation",
    "draw_rotation",
    "draw_permutation",
    "apply_se_n_augmentation",
    "apply_permutation_augmentation",
    "rotate_translate_batch",
    "permute_batch",
]


@dataclass
class GroupAugmentation:
    kind: str  # "se_n" | "permutation"
    dim: int
    translation_scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("se_n", "permutation"):
            raise ValueError(f"contract violation: unknown augmentation kind {self.kind!r}")
        if self.kind == "se_n" and self.dim not in (2, 3):
            raise ValueError("contract violation: se_n augmentation supports D in {2, 3}")

    def rng(self):
        return np.random.default_rng(self.seed)


def draw_rotation(d: int, rng) -> np.ndarray:
    """Haar-distributed rotation in SO(d)."""
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q


def draw_permutation(k: int, rng) -> np.ndarray:
    return rng.permutation(k)


def apply_se_n_augmentation(sample: TrajectorySample, aug: GroupAugmentation,
                            rng=None) -> TrajectorySample:
    """C <- R C + b (b shared across times and particles), V <- R V.

    Velocities are translation-invariant vectors, so only coordinates are
    shifted.  Masses and edges are untouched.
    """
    if aug.kind != "se_n":
        raise ValueError("contract violation: augmentation kind must be se_n")
    rng = aug.rng() if rng is None else rng
    rot = draw_rotation(aug.dim, rng)
    shift = aug.translation_scale * rng.standard_normal(aug.dim)
    return TrajectorySample(
        c=sample.c @ rot.T + shift,
        v=sample.v @ rot.T,
        masses=sample.masses.copy(),
        constant=sample.constant,
        edges=None if sample.edges is None else sample.edges.copy(),
        dt=sample.dt,
    )


def apply_permutation_augmentation(sample: TrajectorySample, aug: GroupAugmentation,
                                   rng=None) -> TrajectorySample:
    """Relabel particles by a random bijection; edges map (i,j) -> (pi,pj)."""
    if aug.kind != "permutation":
        raise ValueError("contract violation: augmentation kind must be permutation")
    rng = aug.rng() if rng is None else rng
    perm = draw_permutation(sample.n_particles, rng)
    edges = None
    if sample.edges is not None:
        edges = sample.edges[np.ix_(perm, perm)]
    return TrajectorySample(
        c=sample.c[:, perm],
        v=sample.v[:, perm],
        masses=sample.masses[perm],
        constant=sample.constant,
        edges=edges,
        dt=sample.dt,
    )


def rotate_translate_batch(c, v, rots, shifts):
    """Apply per-sample rigid motions to stacked [B, L, K, D] arrays."""
    c2 = np.einsum("blkd,bed->blke", c, rots) + shifts[:, None, None, :]
    v2 = np.einsum("blkd,bed->blke", v, rots)
    return c2, v2


def permute_batch(x, perms):
    """Permute the particle axis of [B, L, K, ...] per sample."""
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        out[b] = x[b][:, perms[b]]
    return out
