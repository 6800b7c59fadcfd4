"""Ground-truth physics generators and roll-forward simulation.

Particle families integrate with classical RK4, vectorized over a whole
batch of independent samples; pairwise forces are accumulated antisymmetric
pair by pair so total momentum is conserved to roundoff.  Field families are
either analytic (advection, Burgers pre-shock by characteristics) or solved
by a standard scheme (leapfrog shallow water, implicit-Euler Darcy).

All initial-condition distributions are our own choice (recorded in the
returned samples' params); physical constants are normalized to 1.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from physgen.data import FieldSample, TrajectorySample

__all__ = [
    "gen_threebody",
    "gen_fivespring",
    "gen_advection",
    "gen_burgers",
    "gen_shallow_water",
    "gen_darcy",
    "rollforward",
    "rollforward_batch",
    "THREEBODY_FRAMES",
    "FIVESPRING_FRAMES",
]

THREEBODY_FRAMES = 10   # L=10, K=3, D=3
FIVESPRING_FRAMES = 50  # L=50, K=5, D=2
FRAME_DT = 0.1
MIN_SEPARATION = 0.1    # draws dipping below this are rejected and resampled
SUBSTEPS = 100


def _rng_for(seed, stream=0):
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(stream))))


def _gravity_accel(c, g_const):
    """Pairwise gravitational accelerations for unit masses, batched [N,K,D].

    Forces are accumulated as exact +/- pairs so they cancel to roundoff.
    """
    acc = np.zeros_like(c)
    k = c.shape[1]
    for i in range(k):
        for j in range(i + 1, k):
            diff = c[:, j] - c[:, i]
            r2 = np.sum(diff * diff, axis=-1)
            f = g_const * diff / (r2 * np.sqrt(r2))[:, None]
            acc[:, i] += f
            acc[:, j] -= f
    return acc


def _spring_accel(c, kappa, edges):
    """Hookean accelerations (natural length 0) per sample edge sets [N,K,K]."""
    # F_i = -kappa * sum_j e_ij (c_i - c_j), assembled pairwise antisymmetric
    n, k, d = c.shape
    acc = np.zeros_like(c)
    for i in range(k):
        for j in range(i + 1, k):
            con = edges[:, i, j].astype(np.float64)[:, None]
            f = -kappa * con * (c[:, i] - c[:, j])
            acc[:, i] += f
            acc[:, j] -= f
    return acc


def _rk4_batch(c, v, accel_fn, n_frames, frame_dt, substeps, track_min=False):
    """Record n_frames states (including the initial one) under RK4.

    With track_min, also returns each sample's minimum pairwise separation
    seen at the recorded substep boundaries.
    """
    h = frame_dt / substeps
    frames_c = [c.copy()]
    frames_v = [v.copy()]
    per_sample_min = _min_pair_distance(c) if track_min else None
    for _ in range(n_frames - 1):
        for _ in range(substeps):
            k1v = accel_fn(c)
            k1c = v
            k2v = accel_fn(c + 0.5 * h * k1c)
            k2c = v + 0.5 * h * k1v
            k3v = accel_fn(c + 0.5 * h * k2c)
            k3c = v + 0.5 * h * k2v
            k4v = accel_fn(c + h * k3c)
            k4c = v + h * k3v
            c = c + (h / 6.0) * (k1c + 2 * k2c + 2 * k3c + k4c)
            v = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
            if track_min:
                per_sample_min = np.minimum(per_sample_min, _min_pair_distance(c))
        frames_c.append(c.copy())
        frames_v.append(v.copy())
    return np.stack(frames_c, axis=1), np.stack(frames_v, axis=1), per_sample_min


def _min_pair_distance(c):
    k = c.shape[1]
    best = np.full(c.shape[0], np.inf)
    for i in range(k):
        for j in range(i + 1, k):
            r = np.linalg.norm(c[:, i] - c[:, j], axis=-1)
            best = np.minimum(best, r)
    return best


def _integrate_threebody(c0, v0, n_frames, frame_dt, substeps, g_const=1.0):
    def accel(c):
        return _gravity_accel(c, g_const)

    return _rk4_batch(
        c0.copy(), v0.copy(), accel, n_frames, frame_dt, substeps, track_min=True
    )


def gen_threebody(n, seed=0, n_frames=THREEBODY_FRAMES, frame_dt=FRAME_DT,
                  substeps=SUBSTEPS, min_separation=MIN_SEPARATION,
                  velocity_scale=0.4, position_radius=1.0):
    """Chaotic three-body trajectories in 3D with rejection resampling.

    Positions start uniform in a ball, velocities Gaussian; G = m_k = 1.
    A draw whose minimum pairwise separation dips below `min_separation`
    anywhere along the integration is rejected and redrawn (close encounters
    blow up the energy error of any fixed-step integrator).
    """
    if n < 1:
        raise ValueError("contract violation: n >= 1")
    k, d = 3, 3
    rng = _rng_for(seed)
    samples: list[TrajectorySample] = []
    pending = n
    attempt = 0
    while pending > 0:
        attempt += 1
        if attempt > 200:
            raise RuntimeError("three-body rejection loop failed to converge")
        batch = max(pending + 4, int(pending * 1.3))
        # uniform in ball via normalized Gaussian times radius^(1/3) scaling
        raw = rng.standard_normal((batch, k, d))
        radii = position_radius * rng.random((batch, k)) ** (1.0 / 3.0)
        c0 = raw / np.linalg.norm(raw, axis=-1, keepdims=True) * radii[..., None]
        v0 = velocity_scale * rng.standard_normal((batch, k, d))
        ok_start = _min_pair_distance(c0) > min_separation
        c0, v0 = c0[ok_start], v0[ok_start]
        if c0.shape[0] == 0:
            continue
        cs, vs, dmin = _integrate_threebody(c0, v0, n_frames, frame_dt, substeps)
        keep = dmin > min_separation
        for idx in np.flatnonzero(keep):
            if pending == 0:
                break
            samples.append(
                TrajectorySample(
                    c=cs[idx], v=vs[idx], masses=np.ones(k), constant=1.0, dt=frame_dt
                )
            )
            pending -= 1
    return samples


def gen_fivespring(n, seed=0, n_frames=FIVESPRING_FRAMES, frame_dt=FRAME_DT,
                   substeps=10, edge_prob=0.5, velocity_scale=0.5,
                   position_scale=1.0):
    """Five particles in 2D, each pair spring-connected with probability 1/2.

    Hookean forces with natural length zero; kappa = m_k = 1.  Springs cannot
    blow up, so no rejection is needed.
    """
    if n < 1:
        raise ValueError("contract violation: n >= 1")
    k, d = 5, 2
    rng = _rng_for(seed)
    c0 = position_scale * rng.standard_normal((n, k, d))
    v0 = velocity_scale * rng.standard_normal((n, k, d))
    iu = np.triu_indices(k, 1)
    edges = np.zeros((n, k, k), dtype=bool)
    draws = rng.random((n, len(iu[0]))) < edge_prob
    edges[:, iu[0], iu[1]] = draws
    edges[:, iu[1], iu[0]] = draws

    def accel(c):
        return _spring_accel(c, 1.0, edges)

    cs, vs, _ = _rk4_batch(c0, v0, accel, n_frames, frame_dt, substeps)
    return [
        TrajectorySample(
            c=cs[i], v=vs[i], masses=np.ones(k), constant=1.0, edges=edges[i], dt=frame_dt
        )
        for i in range(n)
    ]


def _random_sine_modes(rng, x, max_modes=4, max_wavenumber=3, amp_range=(0.3, 1.0)):
    n_modes = int(rng.integers(1, max_modes + 1))
    u = np.zeros_like(x)
    for _ in range(n_modes):
        k = int(rng.integers(1, max_wavenumber + 1))
        amp = rng.uniform(*amp_range) / n_modes
        phase = rng.uniform(0, 2 * np.pi)
        u = u + amp * np.sin(2 * np.pi * k * x + phase)
    return u


def gen_advection(n, beta=0.1, nt=32, nx=32, t_end=2.0, seed=0):
    """Exact transport of random sine superpositions on a periodic grid.

    u(t, x) = u0(x - beta t) sampled analytically; no solver error.
    """
    if n < 1:
        raise ValueError("contract violation: n >= 1")
    x = np.arange(nx) / nx
    t = t_end * (np.arange(nt) + 1.0) / nt
    dt, dx = t_end / nt, 1.0 / nx
    out = []
    for i in range(n):
        rng = _rng_for(seed, i)
        shifted = (x[None, :] - beta * t[:, None]) % 1.0
        n_modes = int(rng.integers(1, 5))
        u = np.zeros((nt, nx))
        for _ in range(n_modes):
            k = int(rng.integers(1, 4))
            amp = rng.uniform(0.3, 1.0) / n_modes
            phase = rng.uniform(0, 2 * np.pi)
            u += amp * np.sin(2 * np.pi * k * shifted + phase)
        out.append(FieldSample(u, dt=dt, dx=dx, params={"beta": beta}))
    return out


def gen_burgers(n, nt=32, nx=32, t_end=1.0, max_slope=0.8, seed=0):
    """Pre-shock Burgers solutions by the method of characteristics.

    Each grid value solves u = u0(x - u t) by bisection, so the sample is a
    true smooth solution of u_t + u u_x = 0.  Initial profiles are scaled so
    max |u0'| <= max_slope, and the window must end before the earliest
    possible shock time 1 / max_slope.
    """
    if n < 1:
        raise ValueError("contract violation: n >= 1")
    if t_end >= 1.0 / max_slope:
        raise ValueError(
            "contract violation: recording window reaches the shock time "
            f"(t_end {t_end} >= {1.0 / max_slope:.3f})"
        )
    x = np.arange(nx) / nx
    t = t_end * (np.arange(nt) + 1.0) / nt
    dt, dx = t_end / nt, 1.0 / nx
    out = []
    for i in range(n):
        rng = _rng_for(seed, i)
        n_modes = int(rng.integers(1, 3))
        ks = rng.integers(1, 3, size=n_modes)
        amps = rng.uniform(0.3, 1.0, size=n_modes)
        phases = rng.uniform(0, 2 * np.pi, size=n_modes)
        slope_bound = np.sum(2 * np.pi * ks * amps)
        amps *= max_slope / slope_bound  # guarantees max |u0'| <= max_slope
        offset = rng.uniform(-0.5, 0.5)

        def u0(xs):
            val = np.full_like(xs, offset)
            for k, a, p in zip(ks, amps, phases):
                val = val + a * np.sin(2 * np.pi * k * xs + p)
            return val

        u = np.empty((nt, nx))
        for row, tn in enumerate(t):
            lo = np.full(nx, offset - amps.sum() - 1e-9)
            hi = np.full(nx, offset + amps.sum() + 1e-9)
            for _ in range(60):  # bisection on g(u) = u - u0(x - u t)
                mid = 0.5 * (lo + hi)
                gmid = mid - u0(x - mid * tn)
                neg = gmid < 0
                lo = np.where(neg, mid, lo)
                hi = np.where(neg, hi, mid)
            u[row] = 0.5 * (lo + hi)
        out.append(FieldSample(u, dt=dt, dx=dx, params={}))
    return out


def gen_shallow_water(n, c_range=(0.5, 1.5), nt=FIVESPRING_FRAMES, nh=16, nw=16,
                      n_bumps=3, substeps=16, cfl=0.5, seed=0):
    """Linear shallow-water dynamics from Gaussian surface bumps, leapfrog.

    The wave speed c is drawn per sample and stored as the conditioning
    scalar.  Recorded frames are spaced one CFL interval apart at the largest
    admissible c; the integrator takes `substeps` leapfrog steps per frame.
    A config violating stability is rejected up front.
    """
    if n < 1:
        raise ValueError("contract violation: n >= 1")
    dx = 1.0 / nw
    dy = 1.0 / nh
    frame_dt = cfl * min(dx, dy) / max(c_range)
    step = frame_dt / substeps
    if max(c_range) * step / min(dx, dy) > 0.7:
        raise ValueError("contract violation: CFL stability bound exceeded")
    ys = (np.arange(nh) + 0.5) / nh
    xs = (np.arange(nw) + 0.5) / nw
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = []
    for i in range(n):
        rng = _rng_for(seed, i)
        c = float(rng.uniform(*c_range))
        h = np.zeros((nh, nw))
        for _ in range(n_bumps):
            cx, cy = rng.random(2)
            width = rng.uniform(0.12, 0.3)
            amp = rng.uniform(0.3, 1.0)
            # periodic squared distance
            ddx = np.minimum(np.abs(xx - cx), 1.0 - np.abs(xx - cx))
            ddy = np.minimum(np.abs(yy - cy), 1.0 - np.abs(yy - cy))
            h += amp * np.exp(-(ddx**2 + ddy**2) / (2 * width**2))
        h -= h.mean()
        u = np.zeros_like(h)
        v = np.zeros_like(h)

        def ddx_c(q):
            return (np.roll(q, -1, axis=1) - np.roll(q, 1, axis=1)) / (2 * dx)

        def ddy_c(q):
            return (np.roll(q, -1, axis=0) - np.roll(q, 1, axis=0)) / (2 * dy)

        def tendency(s):
            h_, u_, v_ = s
            return np.stack(
                [-c * c * (ddx_c(u_) + ddy_c(v_)), -ddx_c(h_), -ddy_c(h_)], axis=0
            )

        frames = np.empty((3, nt, nh, nw))
        state = np.stack([h, u, v])
        frames[:, 0] = state
        prev = state - step * tendency(state)  # first-order bootstrap
        for fi in range(1, nt):
            for _ in range(substeps):
                nxt = prev + 2.0 * step * tendency(state)
                prev, state = state, nxt
            frames[:, fi] = state
        out.append(FieldSample(frames, dt=frame_dt, dx=dx, dy=dy, params={"c": c}))
    return out


def _darcy_operator(a, h):
    """Sparse 5-point flux-form div(a grad .) with homogeneous Dirichlet."""
    n = a.shape[0]
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []

    def add(r, c_, v):
        rows.append(r)
        cols.append(c_)
        vals.append(v)

    for i in range(n):
        for j in range(n):
            r = idx[i, j]
            diag = 0.0
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < n and 0 <= nj < n:
                    coeff = 0.5 * (a[i, j] + a[ni, nj]) / h**2
                    add(r, idx[ni, nj], coeff)
                    diag -= coeff
                else:
                    diag -= a[i, j] / h**2  # Dirichlet ghost cell at u = 0
            add(r, r, diag)
    return sparse.csc_matrix((vals, (rows, cols)), shape=(n * n, n * n))


def gen_darcy(n, grid=32, a_levels=(3.0, 1.0), t_final=1.0, n_steps=20,
              smooth_iters=4, seed=0, store_frames=0):
    """Piecewise-constant permeability fields with implicit-Euler diffusion.

    a(x) is two-level thresholded smoothed noise, f = 1, and u evolves from
    zero to t = 1.  Each sample holds the condition a and the final u; set
    store_frames > 0 to also keep that many trailing frames for residual
    diagnostics.
    """
    if n < 1:
        raise ValueError("contract violation: n >= 1")
    h = 1.0 / (grid - 1)
    dt = t_final / n_steps
    out = []
    for i in range(n):
        rng = _rng_for(seed, i)
        noise = rng.standard_normal((grid, grid))
        for _ in range(smooth_iters):  # separable 3-point smoothing
            noise = 0.25 * (np.roll(noise, 1, 0) + np.roll(noise, -1, 0)) + 0.5 * noise
            noise = 0.25 * (np.roll(noise, 1, 1) + np.roll(noise, -1, 1)) + 0.5 * noise
        a = np.where(noise > np.median(noise), a_levels[0], a_levels[1])
        f = np.ones((grid, grid))
        op = _darcy_operator(a, h)
        system = sparse.eye(grid * grid, format="csc") - dt * op
        try:
            solver = splu(system)
        except RuntimeError as exc:  # pragma: no cover - singular system
            raise RuntimeError(f"darcy linear solver failed: {exc}") from exc
        u = np.zeros(grid * grid)
        frames = []
        for s in range(n_steps):
            u = solver.solve(u + dt * f.ravel())
            if not np.all(np.isfinite(u)):
                raise RuntimeError("darcy linear solver produced non-finite values")
            if store_frames and s >= n_steps - store_frames:
                frames.append(u.reshape(grid, grid).copy())
        params = {"a": a, "f_const": 1.0}
        if store_frames:
            data = np.stack(frames)
        else:
            data = u.reshape(grid, grid)
        out.append(FieldSample(data, dt=dt, dx=h, dy=h, params=params))
    return out


def rollforward_batch(c0, v0, family, horizon, frame_dt=FRAME_DT, edges=None,
                      substeps=None, min_separation=MIN_SEPARATION):
    """Vectorized rollforward over [N,K,D] states.

    Returns (C, V, ok) where ok flags samples free of close encounters
    (always true for springs).
    """
    c0 = np.asarray(c0, dtype=np.float64)
    v0 = np.asarray(v0, dtype=np.float64)
    if family == "threebody":
        steps = SUBSTEPS if substeps is None else substeps
        cs, vs, dmin = _integrate_threebody(c0, v0, horizon + 1, frame_dt, steps)
        return cs, vs, dmin > min_separation
    if family == "fivespring":
        if edges is None:
            raise ValueError("contract violation: five-spring rollforward needs edges")
        steps = 10 if substeps is None else substeps
        e = np.asarray(edges, dtype=bool)

        def accel(c):
            return _spring_accel(c, 1.0, e)

        cs, vs, _ = _rk4_batch(c0.copy(), v0.copy(), accel, horizon + 1, frame_dt, steps)
        return cs, vs, np.ones(c0.shape[0], dtype=bool)
    raise ValueError(f"contract violation: unknown particle family {family!r}")


def rollforward(c0, v0, family, horizon, frame_dt=FRAME_DT, edges=None,
                substeps=None, min_separation=MIN_SEPARATION):
    """Integrate the true dynamics from a single frame's state.

    Returns (C, V) over `horizon + 1` frames including the start, or raises
    ValueError for three-body states that hit the close-encounter rejection
    rule.
    """
    c0 = np.asarray(c0, dtype=np.float64)[None]
    v0 = np.asarray(v0, dtype=np.float64)[None]
    if family == "threebody":
        steps = SUBSTEPS if substeps is None else substeps
        cs, vs, dmin = _integrate_threebody(c0, v0, horizon + 1, frame_dt, steps)
        if dmin[0] <= min_separation:
            raise ValueError("domain error: close encounter during rollforward")
    elif family == "fivespring":
        if edges is None:
            raise ValueError("contract violation: five-spring rollforward needs edges")
        steps = 10 if substeps is None else substeps
        e = np.asarray(edges, dtype=bool)[None]

        def accel(c):
            return _spring_accel(c, 1.0, e)

        cs, vs, _ = _rk4_batch(c0, v0, accel, horizon + 1, frame_dt, steps)
    else:
        raise ValueError(f"contract violation: unknown particle family {family!r}")
    return cs[0], vs[0]
