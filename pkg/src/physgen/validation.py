"""Input validation helpers for the estimator API."""
from __future__ import annotations

import numpy as np

from physgen.data import FieldSample, TrajectorySample
from physgen.train import FIELD_FAMILIES, PARTICLE_FAMILIES

__all__ = ["check_family", "check_dataset", "check_conditions"]


def check_family(family):
    if family not in PARTICLE_FAMILIES + FIELD_FAMILIES:
        raise ValueError(
            f"unknown family {family!r}; expected one of "
            f"{sorted(PARTICLE_FAMILIES + FIELD_FAMILIES)}"
        )
    return family


def check_dataset(family, X):
    """Validate a homogeneous list of samples for `family`."""
    check_family(family)
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a non-empty list of samples")
    want = TrajectorySample if family in PARTICLE_FAMILIES else FieldSample
    shapes = set()
    for s in X:
        if not isinstance(s, want):
            raise TypeError(
                f"family {family!r} expects {want.__name__} entries, got {type(s).__name__}"
            )
        arr = s.c if isinstance(s, TrajectorySample) else s.data
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        shapes.add(arr.shape)
    if len(shapes) != 1:
        raise ValueError(f"samples must share one shape, got {sorted(shapes)}")
    if family == "fivespring" and any(s.edges is None for s in X):
        raise ValueError("five-spring samples need edge sets")
    return list(X)


def check_conditions(family, conditions, n, predict_frames=0):
    """Normalize the conditioning payload for conditional families."""
    needs = family in ("fivespring", "shallow_water", "darcy") or predict_frames > 0
    if not needs:
        if conditions is not None:
            raise ValueError(f"family {family!r} is unconditional")
        return None
    if conditions is None:
        raise ValueError(f"family {family!r} requires conditions")
    conds = np.asarray(conditions, dtype=np.float64)
    if conds.shape[0] != n:
        raise ValueError(f"need {n} conditions, got {conds.shape[0]}")
    return conds
