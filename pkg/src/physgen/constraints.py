"""Physical-feasibility residual operators and penalty builders.

Residuals are finite-difference discretizations of the governing equations
(or conservation-law deviations for particle systems).  Every operator is
written against plain slicing/arithmetic so it evaluates both on numpy
arrays (dataset diagnostics) and on autodiff tensors (training penalties).

Penalty builders follow the constraint-case taxonomy: linear and convex
residuals apply directly to the data prediction, multilinear ones go through
a frozen-factor affine form, reducible-nonlinear ones compare elementary
reparameterizations (inverse/squared distances, squared velocities) against
ground truth, and general-nonlinear ones penalize auxiliary heads only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from physgen import tensor as T
from physgen.data import FieldSample, TrajectorySample
from physgen.tensor import Tensor

__all__ = [
    "ConstraintSpec",
    "MultilinearForm",
    "advection_residual",
    "burgers_residual",
    "burgers_multilinear_form",
    "darcy_residual",
    "shallow_water_residual",
    "total_momentum",
    "momentum_penalty",
    "threebody_energy",
    "fivespring_energy",
    "energy_penalty_reducible",
    "energy_penalty_general",
    "energy_variance_penalty",
    "multilinear_penalty",
    "pair_indices",
]

DIST_FLOOR = 1e-3

_ALLOWED_CASES = {
    "advection": {"linear", "convex"},
    "darcy": {"linear", "convex"},
    "shallow_water": {"linear", "convex"},
    "burgers": {"multilinear"},
    "momentum": {"linear", "convex"},
    "energy_threebody": {"reducible_nonlinear", "general_nonlinear", "pinn_naive"},
    "energy_fivespring": {"reducible_nonlinear", "general_nonlinear", "pinn_naive"},
}


@dataclass
class ConstraintSpec:
    """A residual operator tagged with its taxonomy case and penalty weight."""

    family: str
    case_tag: str
    params: dict = field(default_factory=dict)
    weight: float = 0.1

    def __post_init__(self):
        if self.family not in _ALLOWED_CASES:
            raise ValueError(f"contract violation: unknown constraint family {self.family!r}")
        if self.case_tag not in _ALLOWED_CASES[self.family]:
            raise ValueError(
                f"contract violation: case {self.case_tag!r} not valid for "
                f"family {self.family!r}"
            )
        if self.weight < 0:
            raise ValueError("contract violation: penalty weight must be >= 0")


def _is_tensor(x):
    return isinstance(x, Tensor)


def _sq(x):
    return T.square(x) if _is_tensor(x) else x * x


def _sqrt(x):
    return T.sqrt(x) if _is_tensor(x) else np.sqrt(x)


def _take(x, idx, axis):
    return T.take(x, idx, axis=axis) if _is_tensor(x) else np.take(x, idx, axis=axis)


def _cat(parts, axis):
    if any(_is_tensor(p) for p in parts):
        return T.concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def _roll_back(q, axis):
    """q shifted by -1 along axis with periodic wrap (q[i] -> q[i+1])."""
    ndim = q.ndim
    axis = axis % ndim
    head = tuple(slice(None) for _ in range(axis))
    return _cat([q[head + (slice(1, None),)], q[head + (slice(0, 1),)]], axis=axis)


def _roll_fwd(q, axis):
    """q shifted by +1 along axis with periodic wrap (q[i] -> q[i-1])."""
    ndim = q.ndim
    axis = axis % ndim
    head = tuple(slice(None) for _ in range(axis))
    return _cat([q[head + (slice(-1, None),)], q[head + (slice(0, -1),)]], axis=axis)


def _grid_args(u, dt, dx, dy=None, need_dy=False):
    if isinstance(u, FieldSample):
        dt = u.dt if dt is None else dt
        dx = u.dx if dx is None else dx
        dy = u.dy if dy is None else dy
        u = u.data
    if dt is None or dx is None or (need_dy and dy is None):
        raise ValueError("contract violation: grid spacings required")
    return u, dt, dx, dy


# PDE residuals ---------------------------------------------------------------

def advection_residual(u, beta=None, dt=None, dx=None):
    """Transport residual du/dt + beta du/dx on the forward/forward stencil.

    Input [.., T, X], output [.., T-1, X-1]; linear in u.
    """
    if isinstance(u, FieldSample) and beta is None:
        beta = u.params.get("beta")
    u, dt, dx, _ = _grid_args(u, dt, dx)
    if beta is None:
        raise ValueError("contract violation: beta required")
    if u.shape[-2] < 2 or u.shape[-1] < 2:
        raise ValueError(f"contract violation: grid too small {u.shape}")
    core = u[..., :-1, :-1]
    return (u[..., 1:, :-1] - core) * (1.0 / dt) + (u[..., :-1, 1:] - core) * (beta / dx)


def burgers_residual(u, dt=None, dx=None):
    """du/dt + u du/dx with forward time and central space differences.

    Input [.., T, X], output [.., T-1, X-2]; linear in each entry with the
    others frozen (multilinear).
    """
    u, dt, dx, _ = _grid_args(u, dt, dx)
    if u.shape[-2] < 2 or u.shape[-1] < 3:
        raise ValueError(f"contract violation: grid too small {u.shape}")
    mid = u[..., :-1, 1:-1]
    dudt = (u[..., 1:, 1:-1] - mid) * (1.0 / dt)
    dudx = (u[..., :-1, 2:] - u[..., :-1, :-2]) * (1.0 / (2.0 * dx))
    return dudt + mid * dudx


def darcy_residual(u, a, f, dt=None, dx=None, dy=None, steady=False):
    """du/dt - div(a grad u) - f with central differences and flux-form
    diffusion (arithmetic-mean interface coefficients).

    Time-dependent: u [.., T, H, W] with T >= 3, residual on interior times
    and interior points [.., T-2, H-2, W-2].  Steady: the time term is
    dropped and every frame is treated independently.
    """
    if isinstance(u, FieldSample):
        dt = u.dt if dt is None else dt
        dx = u.dx if dx is None else dx
        dy = u.dy if dy is None else dy
        u = u.data
    if dx is None or (not steady and dt is None):
        raise ValueError("contract violation: grid spacings required")
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if dy is None:
        dy = dx
    if u.shape[-2] < 3 or u.shape[-1] < 3:
        raise ValueError(f"contract violation: grid too small {u.shape}")

    def flux_div(q):
        # q: [.., H, W] frame(s); a may carry matching leading batch axes
        ax_e = 0.5 * (a[..., :, 1:] + a[..., :, :-1])
        ax_n = 0.5 * (a[..., 1:, :] + a[..., :-1, :])
        fx = (q[..., :, 1:] - q[..., :, :-1]) * (ax_e / dx)
        fy = (q[..., 1:, :] - q[..., :-1, :]) * (ax_n / dy)
        div_x = (fx[..., 1:-1, 1:] - fx[..., 1:-1, :-1]) * (1.0 / dx)
        div_y = (fy[..., 1:, 1:-1] - fy[..., :-1, 1:-1]) * (1.0 / dy)
        return div_x + div_y

    if steady:
        inner = flux_div(u)
        return -1.0 * inner - f[..., 1:-1, 1:-1]
    if u.ndim < 3 or u.shape[-3] < 3:
        raise ValueError("contract violation: time-dependent residual needs T >= 3")
    dudt = (u[..., 2:, 1:-1, 1:-1] - u[..., :-2, 1:-1, 1:-1]) * (1.0 / (2.0 * dt))
    mid = u[..., 1:-1, :, :]
    return dudt - flux_div(mid) - f[..., 1:-1, 1:-1]


def shallow_water_residual(h, u=None, v=None, c=None, dt=None, dx=None, dy=None):
    """Linearized shallow-water residuals (r_u, r_v, r_h).

    Forward time differences, central space differences with periodic wrap.
    Fields share [.., T, H, W]; each residual is [.., T-1, H, W] and linear
    in (h, u, v).  x runs along the last axis, y along the second-to-last.
    """
    if isinstance(h, FieldSample):
        sample = h
        h, u, v = sample.shallow_water_fields()
        c = sample.params.get("c") if c is None else c
        dt = sample.dt if dt is None else dt
        dx = sample.dx if dx is None else dx
        dy = sample.dy if dy is None else dy
    if c is None or dt is None or dx is None:
        raise ValueError("contract violation: c and grid spacings required")
    if dy is None:
        dy = dx
    shapes = {q.shape for q in (h, u, v)}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: h/u/v shapes differ: {shapes}")

    def ddx(q):
        return (_roll_back(q, -1) - _roll_fwd(q, -1)) * (1.0 / (2.0 * dx))

    def ddy(q):
        return (_roll_back(q, -2) - _roll_fwd(q, -2)) * (1.0 / (2.0 * dy))

    past = slice(None, -1)
    r_u = (u[..., 1:, :, :] - u[..., past, :, :]) * (1.0 / dt) + ddx(h[..., past, :, :])
    r_v = (v[..., 1:, :, :] - v[..., past, :, :]) * (1.0 / dt) + ddy(h[..., past, :, :])
    r_h = (h[..., 1:, :, :] - h[..., past, :, :]) * (1.0 / dt) + (c * c) * (
        ddx(u[..., past, :, :]) + ddy(v[..., past, :, :])
    )
    return r_u, r_v, r_h


# conservation quantities ------------------------------------------------------

def pair_indices(k: int):
    """Unordered particle pairs i < j."""
    iu = np.triu_indices(k, 1)
    return iu[0], iu[1]


def total_momentum(v, masses):
    """P[l, d] = sum_k m_k V[l, k, d]; supports leading batch axes."""
    m = np.asarray(masses, dtype=np.float64)
    if np.any(m <= 0):
        raise ValueError("contract violation: masses must be positive")
    return (v * m[:, None]).sum(axis=-2)


def momentum_penalty(v, masses):
    """Squared deviation of per-time total momentum from its temporal mean.

    Zero iff momentum is constant over time; linear-case penalty applied to
    the velocity half of the data prediction.  Returns per-sample scalars for
    batched input.
    """
    p = total_momentum(v, masses)
    pbar = p.mean(axis=-2, keepdims=True)
    return _sq(p - pbar).sum(axis=(-1, -2))


def _pair_distances(c, i_idx, j_idx):
    diff = _take(c, i_idx, axis=-2) - _take(c, j_idx, axis=-2)
    return _sqrt(_sq(diff).sum(axis=-1))  # [.., L, P]


def threebody_energy(c, v, masses, g_const=1.0):
    """Per-time total energy: pair gravitational potential plus kinetic.

    Unordered pairs i < j (each pair's potential counted once).
    """
    m = np.asarray(masses, dtype=np.float64)
    k = m.shape[0]
    i_idx, j_idx = pair_indices(k)
    dist = _pair_distances(c, i_idx, j_idx)
    dist_np = dist.data if _is_tensor(dist) else dist
    if np.any(dist_np <= 0):
        raise ValueError("domain error: coincident particles")
    mm = m[i_idx] * m[j_idx]
    pot = -1.0 * ((g_const * mm) / dist).sum(axis=-1)
    kin = (0.5 * m[:, None] * _sq(v)).sum(axis=(-1, -2))
    return pot + kin


def fivespring_energy(c, v, masses, kappa, edges):
    """Per-time total energy: half kappa R^2 per spring (counted once) plus kinetic."""
    m = np.asarray(masses, dtype=np.float64)
    e = np.asarray(edges, dtype=bool)
    if not np.array_equal(e, e.T) or np.any(np.diag(e)):
        raise ValueError("contract violation: edges must be symmetric with zero diagonal")
    kin = (0.5 * m[:, None] * _sq(v)).sum(axis=(-1, -2))
    i_idx, j_idx = pair_indices(m.shape[0])
    mask = e[i_idx, j_idx].astype(np.float64)
    if not mask.any():
        return kin + 0.0
    dist2 = _sq(_take(c, i_idx, axis=-2) - _take(c, j_idx, axis=-2)).sum(axis=-1)
    pot = (0.5 * kappa) * (dist2 * mask).sum(axis=-1)
    return pot + kin


# penalty builders -------------------------------------------------------------

def energy_penalty_reducible(pred_c, pred_v, true_c, true_v, family, pair_mask=None):
    """Reducible-nonlinear energy penalty on the main data prediction.

    Three-body: || 1/R_pred - 1/R_true ||^2 summed over times and pairs,
    plus || V_pred^2 - V_true^2 ||^2.  Five-spring: R^2 replaces 1/R and only
    spring pairs count (pair_mask).  Predicted distances are clamped below to
    avoid blowups early in training.  Returns per-sample scalars.
    """
    k = true_c.shape[-2]
    i_idx, j_idx = pair_indices(k)
    pred_d = _pair_distances(pred_c, i_idx, j_idx)
    true_d = _pair_distances(true_c, i_idx, j_idx)
    true_np = true_d.data if _is_tensor(true_d) else true_d
    if family == "energy_threebody":
        if np.any(true_np <= 0):
            raise ValueError("domain error: coincident particles in target")
        pred_d = T.clip_min(pred_d, DIST_FLOOR) if _is_tensor(pred_d) else np.maximum(pred_d, DIST_FLOOR)
        pair_term = _sq(1.0 / pred_d - 1.0 / true_d)
    elif family == "energy_fivespring":
        pair_term = _sq(_sq(pred_d) - _sq(true_d))
    else:
        raise ValueError(f"contract violation: unknown energy family {family!r}")
    if pair_mask is not None:
        mask = np.asarray(pair_mask, dtype=np.float64)
        pair_term = pair_term * mask[..., None, :]
    vel_term = _sq(_sq(pred_v) - _sq(true_v)).sum(axis=(-1, -2, -3))
    return pair_term.sum(axis=(-1, -2)) + vel_term


def energy_penalty_general(aux_pair, aux_vel, true_c, true_v, family, pair_mask=None):
    """General-nonlinear energy penalty on auxiliary heads only.

    aux_pair predicts 1/R (three-body) or R^2 (five-spring, spring pairs
    only); aux_vel predicts squared velocities.  Gradients reach the shared
    hidden state but never the main output head.
    """
    if aux_pair is None or aux_vel is None:
        raise ValueError("contract violation: model lacks the auxiliary heads")
    k = true_c.shape[-2]
    i_idx, j_idx = pair_indices(k)
    true_d = _pair_distances(true_c, i_idx, j_idx)
    if family == "energy_threebody":
        true_np = true_d.data if _is_tensor(true_d) else true_d
        if np.any(true_np <= 0):
            raise ValueError("domain error: coincident particles in target")
        target = 1.0 / true_d
    elif family == "energy_fivespring":
        target = _sq(true_d)
    else:
        raise ValueError(f"contract violation: unknown energy family {family!r}")
    pair_term = _sq(aux_pair - target)
    if pair_mask is not None:
        mask = np.asarray(pair_mask, dtype=np.float64)
        pair_term = pair_term * mask[..., None, :]
    vel_term = _sq(aux_vel - _sq(true_v)).sum(axis=(-1, -2, -3))
    return pair_term.sum(axis=(-1, -2)) + vel_term


def energy_variance_penalty(pred_c, pred_v, masses, family, constant=1.0, edges=None,
                            pair_mask=None):
    """Naive temporal-variance-of-energy penalty ("prior by PINN" ablation).

    Applies the nonlinear conservation statement directly to the data
    prediction, ignoring the Jensen gap: sum_l (E_l - mean_l E)^2.
    """
    if family == "energy_threebody":
        k = np.asarray(masses).shape[0]
        i_idx, j_idx = pair_indices(k)
        dist = _pair_distances(pred_c, i_idx, j_idx)
        dist = T.clip_min(dist, DIST_FLOOR) if _is_tensor(dist) else np.maximum(dist, DIST_FLOOR)
        m = np.asarray(masses, dtype=np.float64)
        mm = m[i_idx] * m[j_idx]
        pot = -1.0 * ((constant * mm) / dist).sum(axis=-1)
        kin = (0.5 * m[:, None] * _sq(pred_v)).sum(axis=(-1, -2))
        energy = pot + kin
    elif family == "energy_fivespring":
        m = np.asarray(masses, dtype=np.float64)
        i_idx, j_idx = pair_indices(m.shape[0])
        dist2 = _sq(_take(pred_c, i_idx, axis=-2) - _take(pred_c, j_idx, axis=-2)).sum(axis=-1)
        if pair_mask is not None:
            mask = np.asarray(pair_mask, dtype=np.float64)
            dist2 = dist2 * mask[..., None, :]
        elif edges is not None:
            e = np.asarray(edges, dtype=bool)
            dist2 = dist2 * e[i_idx, j_idx].astype(np.float64)
        energy = (0.5 * constant) * dist2.sum(axis=-1) + (
            0.5 * m[:, None] * _sq(pred_v)
        ).sum(axis=(-1, -2))
    else:
        raise ValueError(f"contract violation: unknown energy family {family!r}")
    ebar = energy.mean(axis=-1, keepdims=True)
    return _sq(energy - ebar).sum(axis=-1)


@dataclass
class MultilinearForm:
    """Affine form W0 u + b0 with the nonlinear factor frozen at ground truth."""

    kind: str
    w0: np.ndarray | None = None
    b0: np.ndarray | float = 0.0
    frozen: np.ndarray | None = None
    dt: float | None = None
    dx: float | None = None

    @classmethod
    def dense(cls, w0, b0):
        w0 = np.asarray(w0, dtype=np.float64)
        b0 = np.asarray(b0, dtype=np.float64)
        return cls(kind="dense", w0=w0, b0=b0)

    @classmethod
    def burgers(cls, u_frozen, dt, dx):
        return cls(
            kind="burgers",
            frozen=np.asarray(u_frozen, dtype=np.float64),
            b0=0.0,
            dt=dt,
            dx=dx,
        )

    def apply(self, u):
        if self.kind == "dense":
            flat = u.reshape((-1, self.w0.shape[1])) if _is_tensor(u) else np.reshape(
                u, (-1, self.w0.shape[1])
            )
            out = flat @ self.w0.T + self.b0
            return out
        mid = u[..., :-1, 1:-1]
        dudt = (u[..., 1:, 1:-1] - mid) * (1.0 / self.dt)
        dudx = (u[..., :-1, 2:] - u[..., :-1, :-2]) * (1.0 / (2.0 * self.dx))
        return dudt + self.frozen[..., :-1, 1:-1] * dudx + self.b0

    def dense_matrix(self, shape=None):
        """Materialize W0 by applying the form to unit vectors (small grids)."""
        if self.kind == "dense":
            return self.w0
        shape = self.frozen.shape if shape is None else shape
        n = int(np.prod(shape))
        cols = []
        zero_out = np.asarray(self.apply(np.zeros(shape)))
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            cols.append((np.asarray(self.apply(e.reshape(shape))) - zero_out).ravel())
        return np.stack(cols, axis=1)


def burgers_multilinear_form(u_frozen, dt=None, dx=None) -> MultilinearForm:
    """(W0, b0) reproducing the Burgers residual with the advective factor
    frozen at the supplied ground-truth sample."""
    u_frozen, dt, dx, _ = _grid_args(u_frozen, dt, dx)
    return MultilinearForm.burgers(u_frozen, dt, dx)


def multilinear_penalty(form: MultilinearForm, u_pred):
    """|| W0 u_pred + b0 ||^2, summed over residual entries (per sample)."""
    r = form.apply(u_pred)
    if form.kind == "dense":
        return _sq(r).sum(axis=-1)
    return _sq(r).sum(axis=(-1, -2))
