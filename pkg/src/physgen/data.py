"""Sample containers for field and particle datasets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FieldSample", "TrajectorySample"]


@dataclass
class FieldSample:
    """A space-time grid of a PDE field.

    data layout by family: [T, X] for advection/burgers, [T, H, W] for darcy
    slabs (or [H, W] for the steady final frame), [3, T, H, W] for shallow
    water stacked as (h, u, v).
    """

    data: np.ndarray
    dt: float
    dx: float
    dy: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.dt <= 0 or self.dx <= 0 or (self.dy is not None and self.dy <= 0):
            raise ValueError("contract violation: grid spacings must be positive")

    def shallow_water_fields(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(f"not a shallow-water sample: shape {self.data.shape}")
        return self.data[0], self.data[1], self.data[2]


@dataclass
class TrajectorySample:
    """Particle dynamics [C V] over L recorded frames.

    c, v: [L, K, D]; masses: [K]; constant is G (three-body) or kappa
    (five-spring); edges is the symmetric spring adjacency, present only for
    the five-spring family.
    """

    c: np.ndarray
    v: np.ndarray
    masses: np.ndarray
    constant: float = 1.0
    edges: np.ndarray | None = None
    dt: float = 0.1

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.c.shape != self.v.shape or self.c.ndim != 3:
            raise ValueError(
                f"contract violation: coords {self.c.shape} and velocities "
                f"{self.v.shape} must share [L, K, D]"
            )
        if self.masses.shape != (self.c.shape[1],):
            raise ValueError("contract violation: masses must have length K")
        if np.any(self.masses <= 0):
            raise ValueError("contract violation: masses must be positive")
        if self.edges is not None:
            e = np.asarray(self.edges, dtype=bool)
            k = self.c.shape[1]
            if e.shape != (k, k) or not np.array_equal(e, e.T) or np.any(np.diag(e)):
                raise ValueError(
                    "contract violation: edges must be symmetric [K, K] with zero diagonal"
                )
            self.edges = e

    @property
    def frames(self) -> int:
        return self.c.shape[0]

    @property
    def n_particles(self) -> int:
        return self.c.shape[1]

    @property
    def dim(self) -> int:
        return self.c.shape[2]

    def stacked(self) -> np.ndarray:
        """[L, K, 2D] view used as the diffusion sample x0."""
        return np.concatenate([self.c, self.v], axis=-1)
