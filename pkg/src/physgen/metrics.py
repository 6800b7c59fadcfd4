"""Sample-quality metrics, invariance diagnostics, coordinate reconstruction.

Particle metrics roll the true dynamics forward from each generated sample's
first frame and score the deviation; conservation "errors" are the temporal
standard deviation of the conserved quantity (energy) and the RMS deviation
of the momentum vector from its temporal mean, averaged over samples.  That
definition is published here so numbers are comparable across runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from physgen import constraints as C
from physgen.data import FieldSample, TrajectorySample
from physgen.diffusion import forward_sample
from physgen.simulate import rollforward_batch

__all__ = [
    "MetricReport",
    "pde_residual_rmse",
    "prediction_rmse",
    "particle_metrics",
    "invariance_diagnostic",
    "ecm_from_distances",
]


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    fingerprint: str = ""

    def add(self, name, value, count, stderr=None):
        if not np.isfinite(value):
            raise ValueError(f"contract violation: metric {name!r} is not finite")
        if count <= 0:
            raise ValueError("contract violation: sample count must be positive")
        self.metrics[name] = {
            "value": float(value),
            "count": int(count),
            "stderr": None if stderr is None else float(stderr),
        }

    def __getitem__(self, name):
        return self.metrics[name]["value"]

    def to_json(self):
        return json.dumps(
            {"metrics": self.metrics, "fingerprint": self.fingerprint},
            indent=2,
            sort_keys=True,
        )

    def csv_rows(self):
        rows = [("metric", "value", "count", "stderr")]
        for name in sorted(self.metrics):
            m = self.metrics[name]
            rows.append((name, repr(m["value"]), str(m["count"]),
                         "" if m["stderr"] is None else repr(m["stderr"])))
        return rows


def _residuals_for(sample: FieldSample, family):
    if family == "advection":
        return [np.asarray(C.advection_residual(sample))]
    if family == "burgers":
        return [np.asarray(C.burgers_residual(sample))]
    if family == "shallow_water":
        return [np.asarray(r) for r in C.shallow_water_residual(sample)]
    if family == "darcy":
        a = sample.params["a"]
        f = np.full(a.shape, sample.params.get("f_const", 1.0))
        u = sample.data if sample.data.ndim == 2 else sample.data[-1]
        return [np.asarray(C.darcy_residual(u, a, f, dx=sample.dx, steady=True))]
    raise ValueError(f"contract violation: unknown field family {family!r}")


def pde_residual_rmse(samples, family) -> float:
    """Root-mean-square of the PDE residual over all grid points and samples."""
    if not samples:
        raise ValueError("contract violation: no samples")
    total = 0.0
    count = 0
    for s in samples:
        for r in _residuals_for(s, family):
            total += float(np.sum(r * r))
            count += r.size
    return float(np.sqrt(total / count))


def prediction_rmse(pred, truth) -> float:
    """RMSE over all grid points and samples of paired arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def particle_metrics(samples, family, substeps=None, report_fingerprint="") -> MetricReport:
    """Rollforward and conservation metrics for generated trajectories.

    Three-body states that hit the close-encounter rule are excluded and
    counted.  Exposes both the three-body names (trajectory/velocity error)
    and the five-spring name (dynamic error) for the same machinery.
    """
    if not samples:
        raise ValueError("contract violation: no samples")
    l = samples[0].frames
    c0 = np.stack([s.c[0] for s in samples])
    v0 = np.stack([s.v[0] for s in samples])
    edges = None
    if family == "fivespring":
        edges = np.stack([s.edges for s in samples])
    cs, vs, ok = rollforward_batch(
        c0, v0, family, l - 1, frame_dt=samples[0].dt, edges=edges, substeps=substeps
    )
    traj_errs, vel_errs, dyn_errs, e_errs, p_errs = [], [], [], [], []
    for i, s in enumerate(samples):
        if not ok[i]:
            continue
        traj_errs.append(np.mean((s.c[1:] - cs[i, 1:]) ** 2))
        vel_errs.append(np.mean((s.v[1:] - vs[i, 1:]) ** 2))
        dyn_errs.append(0.5 * (traj_errs[-1] + vel_errs[-1]))
        if family == "threebody":
            d = C.pair_indices(s.n_particles)
            dist = np.linalg.norm(s.c[:, d[0]] - s.c[:, d[1]], axis=-1)
            if np.any(dist <= 1e-9):
                energy = None
            else:
                energy = C.threebody_energy(s.c, s.v, s.masses, s.constant)
        else:
            energy = C.fivespring_energy(s.c, s.v, s.masses, s.constant, s.edges)
        if energy is not None:
            e_errs.append(np.std(energy))
        p = C.total_momentum(s.v, s.masses)
        p_errs.append(np.sqrt(np.mean(np.sum((p - p.mean(axis=0)) ** 2, axis=-1))))
    report = MetricReport(fingerprint=report_fingerprint)
    n_ok = len(traj_errs)
    if n_ok == 0:
        raise ValueError("contract violation: every sample was excluded by rollforward")

    def add(name, vals):
        vals = np.asarray(vals)
        report.add(name, vals.mean(), len(vals), vals.std() / np.sqrt(len(vals)))

    add("trajectory_error", traj_errs)
    add("velocity_error", vel_errs)
    add("dynamic_error", dyn_errs)
    add("energy_error", e_errs)
    add("momentum_error", p_errs)
    report.add("excluded", float(len(samples) - n_ok), len(samples))
    return report


def _group_transform(x, kind, dim, rng):
    """Returns (transformed input, output-transform fn) for [., L, K, 2D] arrays."""
    from physgen.augment import draw_permutation, draw_rotation

    if kind == "se_n":
        rot = draw_rotation(dim, rng)
        shift = rng.standard_normal(dim)

        def tin(arr):
            c, v = arr[..., :dim], arr[..., dim:]
            return np.concatenate([c @ rot.T + shift, v @ rot.T], axis=-1)

        def tout(arr):
            c, v = arr[..., :dim], arr[..., dim:]
            return np.concatenate([c @ rot.T, v @ rot.T], axis=-1)

        return tin, tout, None
    if kind == "permutation":
        perm = None

        def tin(arr, _state={}):
            nonlocal perm
            if perm is None:
                perm = draw_permutation(arr.shape[-2], rng)
            return arr[..., perm, :]

        def tout(arr):
            return arr[..., perm, :]

        def tcond(adj):
            return adj[..., perm, :][..., :, perm]

        return tin, tout, tcond
    raise ValueError(f"contract violation: unknown group {kind!r}")


def invariance_diagnostic(model, x0_batch, group, sched, condition=None,
                          t_idx=None, n_draws=4, seed=0) -> MetricReport:
    """Mean relative equivariance deviation of a noise predictor.

    Compares the prediction on group-transformed noisy inputs against the
    transformed prediction; weight-shared permutation backbones sit at
    numerical zero, augmentation-trained rigid-motion models are small but
    nonzero (a diagnostic, not a gate).
    """
    x0 = np.asarray(x0_batch, dtype=np.float64)
    dim = x0.shape[-1] // 2
    t_idx = sched.steps // 2 if t_idx is None else t_idx
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x0.shape)
    xt = np.asarray(forward_sample(x0, t_idx, eps, sched))
    devs = []
    for _ in range(n_draws):
        tin, tout, tcond = _group_transform(xt, group, dim, rng)
        base, _ = model.forward(xt, t_idx, condition)
        cond_t = condition if (condition is None or tcond is None) else tcond(condition)
        moved, _ = model.forward(tin(xt), t_idx, cond_t)
        expected = tout(base.data)
        denom = max(np.linalg.norm(base.data), 1e-12)
        devs.append(np.linalg.norm(moved.data - expected) / denom)
    report = MetricReport()
    devs = np.asarray(devs)
    report.add(f"equivariance_deviation_{group}", devs.mean(), len(devs),
               devs.std() / np.sqrt(len(devs)))
    return report


def ecm_from_distances(dsq):
    """3D coordinates from a squared-distance matrix via its Gram matrix.

    M_ij = (D_1j + D_i1 - D_ij) / 2 anchors point 1 at the origin; the top
    three positive eigenpairs give coordinates V sqrt(lambda).  Inputs that
    are degenerate or non-Euclidean yield fewer positive eigenvalues; the
    result is zero-padded and flagged.
    """
    d = np.asarray(dsq, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"contract violation: need a square matrix, got {d.shape}")
    if not np.allclose(d, d.T, atol=1e-10):
        raise ValueError("contract violation: distance matrix must be symmetric")
    if not np.allclose(np.diag(d), 0.0, atol=1e-12):
        raise ValueError("contract violation: diagonal must be zero")
    n = d.shape[0]
    m = 0.5 * (d[0][None, :] + d[:, 0][:, None] - d)
    evals, evecs = np.linalg.eigh(m)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(np.abs(evals).max(), 1.0) * 1e-12
    coords = np.zeros((n, 3))
    rank = 0
    for i in range(min(3, n)):
        if evals[i] > tol:
            coords[:, i] = evecs[:, i] * np.sqrt(evals[i])
            rank += 1
    degenerate = rank < 3
    return coords, degenerate
