"""Residual operators and penalty builders against closed-form oracles."""

import numpy as np
import pytest

from physgen import tensor as T
from physgen.constraints import (
    ConstraintSpec,
    MultilinearForm,
    advection_residual,
    burgers_multilinear_form,
    burgers_residual,
    darcy_residual,
    energy_penalty_general,
    energy_penalty_reducible,
    energy_variance_penalty,
    fivespring_energy,
    momentum_penalty,
    multilinear_penalty,
    pair_indices,
    shallow_water_residual,
    threebody_energy,
    total_momentum,
)
from physgen.tensor import Tensor, grad_tensors


def advection_grid(nt, nx, beta=0.1, t_end=2.0):
    t = np.linspace(t_end / nt, t_end, nt)
    x = np.arange(nx) / nx
    return t, x, t_end / nt, 1.0 / nx


class TestAdvection:
    def test_constant_field_zero(self):
        r = advection_residual(np.full((5, 7), 3.0), beta=0.1, dt=0.1, dx=0.2)
        assert r.shape == (4, 6)
        np.testing.assert_array_equal(r, 0.0)

    def test_linear_ramp_exact_zero(self):
        # u(t, x) = x - beta*t solves the stencil exactly on any grid
        beta = 0.37
        t, x, dt, dx = advection_grid(9, 13, beta)
        u = x[None, :] - beta * t[:, None]
        r = advection_residual(u, beta=beta, dt=dt, dx=dx)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_sine_wave_first_order_convergence(self):
        # residual halves (order ~1) when the grid is refined 2x
        beta = 0.1
        errs = []
        for n in (64, 128, 256):
            t, x, dt, dx = advection_grid(n, n, beta)
            u = np.sin(2 * np.pi * (x[None, :] - beta * t[:, None]))
            errs.append(np.max(np.abs(advection_residual(u, beta=beta, dt=dt, dx=dx))))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios > 1.6) and np.all(ratios < 2.4)

    def test_linearity(self):
        rng = np.random.default_rng(0)
        u, v = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
        al, be = 1.7, -0.4
        kw = dict(beta=0.1, dt=0.1, dx=0.1)
        lhs = advection_residual(al * u + be * v, **kw)
        rhs = al * advection_residual(u, **kw) + be * advection_residual(v, **kw)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_too_small_grid(self):
        with pytest.raises(ValueError, match="grid too small"):
            advection_residual(np.zeros((1, 5)), beta=0.1, dt=0.1, dx=0.1)


class TestBurgers:
    def test_constant_zero(self):
        np.testing.assert_array_equal(burgers_residual(np.full((4, 5), 2.0), dt=0.1, dx=0.1), 0.0)

    def test_rarefaction_solution_first_order(self):
        # u(t, x) = x / (1 + t) solves u_t + u u_x = 0 exactly
        errs = []
        for n in (32, 64, 128):
            dt, dx = 0.5 / n, 1.0 / n
            t = dt * np.arange(n)
            x = dx * np.arange(n)
            u = x[None, :] / (1.0 + t[:, None])
            errs.append(np.max(np.abs(burgers_residual(u, dt=dt, dx=dx))))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios > 1.5)

    def test_multilinearity_probe(self):
        # residual is affine in any single entry; fd slope == stencil coefficient
        rng = np.random.default_rng(1)
        u = rng.normal(size=(5, 6))
        dt, dx = 0.1, 0.25
        n, i = 2, 3
        base = burgers_residual(u, dt=dt, dx=dx)

        up = u.copy()
        up[n, i] += 1.0
        slope = burgers_residual(up, dt=dt, dx=dx) - base
        up[n, i] += 1.0
        slope2 = (burgers_residual(up, dt=dt, dx=dx) - base) / 2.0
        np.testing.assert_allclose(slope, slope2, atol=1e-10)  # affine, no curvature

        # coefficient on r[n, i-1] from the advective neighbor term
        expected = u[n, i - 1] / (2 * dx)
        np.testing.assert_allclose(slope[n, i - 2], expected, atol=1e-10)
        # coefficient on its own row: -1/dt + central-difference factor
        expected_self = -1.0 / dt + (u[n, i + 1] - u[n, i - 1]) / (2 * dx)
        np.testing.assert_allclose(slope[n, i - 1], expected_self, atol=1e-10)


class TestBurgersMultilinearForm:
    def test_zero_frozen_reduces_to_time_stencil(self):
        dt, dx = 0.2, 0.5
        form = burgers_multilinear_form(np.zeros((4, 5)), dt=dt, dx=dx)
        rng = np.random.default_rng(2)
        u = rng.normal(size=(4, 5))
        np.testing.assert_allclose(
            form.apply(u), (u[1:, 1:-1] - u[:-1, 1:-1]) / dt, atol=1e-12
        )
        assert form.b0 == 0.0

    def test_self_consistency(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=(6, 7))
        form = burgers_multilinear_form(u, dt=0.1, dx=0.2)
        np.testing.assert_allclose(form.apply(u), burgers_residual(u, dt=0.1, dx=0.2), atol=1e-12)

    def test_matches_hand_expanded_stencil(self):
        rng = np.random.default_rng(4)
        frozen = rng.normal(size=(4, 5))
        cand = rng.normal(size=(4, 5))
        dt, dx = 0.15, 0.3
        form = burgers_multilinear_form(frozen, dt=dt, dx=dx)
        out = form.apply(cand)
        for n in range(3):
            for i in range(1, 4):
                hand = (cand[n + 1, i] - cand[n, i]) / dt + frozen[n, i] * (
                    cand[n, i + 1] - cand[n, i - 1]
                ) / (2 * dx)
                np.testing.assert_allclose(out[n, i - 1], hand, atol=1e-12)

    def test_dense_matrix_matches_apply(self):
        rng = np.random.default_rng(5)
        frozen = rng.normal(size=(3, 4))
        form = burgers_multilinear_form(frozen, dt=0.1, dx=0.2)
        w = form.dense_matrix()
        u = rng.normal(size=(3, 4))
        np.testing.assert_allclose(w @ u.ravel(), np.asarray(form.apply(u)).ravel(), atol=1e-12)


class TestDarcy:
    def test_constant_zero(self):
        u = np.full((3, 6, 6), 1.5)
        a = np.ones((6, 6))
        f = np.zeros((6, 6))
        r = darcy_residual(u, a, f, dt=0.1, dx=0.1)
        assert r.shape == (1, 4, 4)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_affine_steady_exact(self):
        # u = x is harmonic; central differences are exact on affine fields
        n = 8
        x = np.arange(n) / n
        u = np.broadcast_to(x, (n, n)).copy()
        r = darcy_residual(u, np.ones((n, n)), np.zeros((n, n)), dx=1.0 / n, steady=True)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_manufactured_solution_second_order(self):
        # steady: u = sin(pi x) sin(pi y), f = 2 pi^2 u, a = 1
        errs = []
        for n in (16, 32, 64):
            h = 1.0 / (n - 1)
            x = np.linspace(0, 1, n)
            xx, yy = np.meshgrid(x, x, indexing="ij")
            u = np.sin(np.pi * xx) * np.sin(np.pi * yy)
            f = 2 * np.pi**2 * u
            r = darcy_residual(u, np.ones((n, n)), f, dx=h, steady=True)
            errs.append(np.max(np.abs(r)))
        slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(np.abs(slopes - 2.0) < 0.3)

    def test_time_dependent_manufactured(self):
        # u = sin(pi x) sin(pi y) e^{-t}: residual with matching f is O(h^2 + dt^2)
        errs = []
        for n in (16, 32):
            h = 1.0 / (n - 1)
            dt = h
            x = np.linspace(0, 1, n)
            xx, yy = np.meshgrid(x, x, indexing="ij")
            space = np.sin(np.pi * xx) * np.sin(np.pi * yy)
            times = np.array([0.5 - dt, 0.5, 0.5 + dt])
            u = space[None] * np.exp(-times)[:, None, None]
            f = (2 * np.pi**2 - 1.0) * space * np.exp(-0.5)
            r = darcy_residual(u, np.ones((n, n)), f, dt=dt, dx=h)
            errs.append(np.max(np.abs(r)))
        assert errs[1] < errs[0] / 2.5

    def test_linearity_in_u(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0.5, 2.0, size=(6, 6))
        f = rng.normal(size=(6, 6))
        u1, u2 = rng.normal(size=(3, 6, 6)), rng.normal(size=(3, 6, 6))
        kw = dict(dt=0.1, dx=0.1)
        r_zero = darcy_residual(np.zeros((3, 6, 6)), a, f, **kw)
        lhs = darcy_residual(u1 + 2.0 * u2, a, f, **kw) - r_zero
        rhs = (darcy_residual(u1, a, f, **kw) - r_zero) + 2.0 * (
            darcy_residual(u2, a, f, **kw) - r_zero
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestShallowWater:
    def test_static_zero(self):
        h = np.full((4, 5, 5), 2.0)
        z = np.zeros((4, 5, 5))
        for r in shallow_water_residual(h, z, z, c=1.0, dt=0.1, dx=0.2):
            np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_plane_wave_convergence(self):
        # h = cos(kx - w t), u = (w/k) cos(kx - w t) / c^2 ... with w = c k solves the system
        c = 1.3
        errs = []
        for n in (32, 64, 128):
            dx = 1.0 / n
            k = 2 * np.pi
            w = c * k
            dt = 0.2 * dx / c
            t = dt * np.arange(24)
            x = dx * np.arange(n)
            phase = k * x[None, None, :] - w * t[:, None, None] + np.zeros((1, n, 1))
            h = np.cos(phase)
            u = (1.0 / c) * np.cos(phase)
            v = np.zeros_like(h)
            r_u, r_v, r_h = shallow_water_residual(h, u, v, c=c, dt=dt, dx=dx)
            errs.append(max(np.abs(r_u).max(), np.abs(r_v).max(), np.abs(r_h).max()))
        assert errs[1] < errs[0] and errs[2] < errs[1]

    def test_shape_contract(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            shallow_water_residual(
                np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((3, 4, 5)),
                c=1.0, dt=0.1, dx=0.1,
            )


class TestMomentum:
    def test_zero_velocity(self):
        np.testing.assert_array_equal(total_momentum(np.zeros((4, 3, 2)), np.ones(3)), 0.0)

    def test_opposite_velocities_cancel(self):
        v = np.zeros((2, 2, 3))
        v[:, 0] = [1.0, -2.0, 0.5]
        v[:, 1] = -v[:, 0]
        np.testing.assert_allclose(total_momentum(v, np.ones(2)), 0.0, atol=1e-15)

    def test_penalty_hand_value(self):
        # L=2, K=1, D=1, m=1, V = [[0],[2]] -> (0-1)^2 + (2-1)^2 = 2
        v = np.array([[[0.0]], [[2.0]]])
        assert momentum_penalty(v, np.ones(1)) == pytest.approx(2.0)

    def test_penalty_zero_for_constant_momentum(self):
        rng = np.random.default_rng(7)
        v0 = rng.normal(size=(1, 4, 3))
        v = np.repeat(v0, 6, axis=0)
        assert momentum_penalty(v, rng.uniform(0.5, 2.0, 4)) == pytest.approx(0.0, abs=1e-20)

    def test_penalty_permutation_invariant(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=(5, 4, 2))
        m = rng.uniform(0.5, 2.0, 4)
        perm = rng.permutation(4)
        np.testing.assert_allclose(
            momentum_penalty(v, m), momentum_penalty(v[:, perm], m[perm]), atol=1e-12
        )


class TestEnergies:
    def test_two_body_rest(self):
        c = np.zeros((1, 2, 3))
        c[0, 1, 0] = 1.0
        e = threebody_energy(c, np.zeros((1, 2, 3)), np.ones(2), g_const=1.0)
        np.testing.assert_allclose(e, [-1.0])

    def test_potential_only_negative(self):
        rng = np.random.default_rng(9)
        c = rng.normal(size=(3, 3, 3)) * 2.0
        e = threebody_energy(c, np.zeros((3, 3, 3)), np.ones(3))
        assert np.all(e < 0)

    def test_coincident_raises(self):
        c = np.zeros((1, 2, 3))
        with pytest.raises(ValueError, match="domain"):
            threebody_energy(c, np.zeros((1, 2, 3)), np.ones(2))

    def test_spring_no_edges_rest(self):
        c = np.random.default_rng(0).normal(size=(2, 5, 2))
        e = fivespring_energy(c, np.zeros((2, 5, 2)), np.ones(5), 1.0, np.zeros((5, 5), bool))
        np.testing.assert_allclose(e, 0.0)

    def test_single_spring_value(self):
        # one spring, distance 2, kappa 1, at rest: E = 0.5 * 1 * 4 = 2
        c = np.zeros((1, 2, 2))
        c[0, 1, 0] = 2.0
        edges = np.array([[False, True], [True, False]])
        e = fivespring_energy(c, np.zeros((1, 2, 2)), np.ones(2), 1.0, edges)
        np.testing.assert_allclose(e, [2.0])

    def test_energy_permutation_invariant(self):
        rng = np.random.default_rng(10)
        c = rng.normal(size=(4, 5, 2))
        v = rng.normal(size=(4, 5, 2))
        m = np.ones(5)
        edges = np.zeros((5, 5), bool)
        edges[0, 3] = edges[3, 0] = edges[1, 2] = edges[2, 1] = True
        perm = rng.permutation(5)
        e1 = fivespring_energy(c, v, m, 1.0, edges)
        e2 = fivespring_energy(c[:, perm], v[:, perm], m[perm], 1.0, edges[np.ix_(perm, perm)])
        np.testing.assert_allclose(e1, e2, atol=1e-8)

    def test_energy_rotation_invariant(self):
        rng = np.random.default_rng(11)
        c = rng.normal(size=(4, 3, 3))
        v = rng.normal(size=(4, 3, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        e1 = threebody_energy(c, v, np.ones(3))
        e2 = threebody_energy(c @ q.T, v @ q.T, np.ones(3))
        np.testing.assert_allclose(e1, e2, atol=1e-8)


class TestReduciblePenalty:
    def test_zero_at_ground_truth(self):
        rng = np.random.default_rng(12)
        c = rng.normal(size=(3, 3, 3))
        v = rng.normal(size=(3, 3, 3))
        p = energy_penalty_reducible(c, v, c, v, "energy_threebody")
        assert p == pytest.approx(0.0, abs=1e-18)

    def test_single_pair_hand_value(self):
        # R_pred = 1, R_true = 2, velocities zero: (1 - 0.5)^2 = 0.25
        cp = np.zeros((1, 2, 3))
        cp[0, 1, 0] = 1.0
        ct = np.zeros((1, 2, 3))
        ct[0, 1, 0] = 2.0
        z = np.zeros((1, 2, 3))
        p = energy_penalty_reducible(cp, z, ct, z, "energy_threebody")
        assert p == pytest.approx(0.25)

    def test_se_n_invariance(self):
        # the pair term is a rigid-motion invariant; the kinetic term compares
        # per-component squared velocities, so full invariance covers common
        # translations (and rotations whenever velocities agree pre-rotation)
        rng = np.random.default_rng(13)
        cp, vp = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
        ct, vt = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        b = rng.normal(size=3)
        p1 = energy_penalty_reducible(cp, vp, ct, vt, "energy_threebody")
        p2 = energy_penalty_reducible(cp + b, vp, ct + b, vt, "energy_threebody")
        np.testing.assert_allclose(p1, p2, atol=1e-8)
        z = np.zeros_like(vp)
        p3 = energy_penalty_reducible(cp, z, ct, z, "energy_threebody")
        p4 = energy_penalty_reducible(
            cp @ q.T + b, z, ct @ q.T + b, z, "energy_threebody"
        )
        np.testing.assert_allclose(p3, p4, atol=1e-8)

    def test_fivespring_variant_masks_pairs(self):
        rng = np.random.default_rng(14)
        cp, vp = rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 5, 2))
        ct = cp.copy()
        ct[:, 0] += 1.0  # perturb distances involving particle 0
        mask = np.zeros(len(pair_indices(5)[0]))
        i_idx, j_idx = pair_indices(5)
        mask[(i_idx != 0) & (j_idx != 0)] = 1.0  # exclude all pairs touching 0
        p = energy_penalty_reducible(cp, vp, ct, vp, "energy_fivespring", pair_mask=mask)
        assert p == pytest.approx(0.0, abs=1e-18)


class TestGeneralPenalty:
    def test_zero_when_aux_matches(self):
        rng = np.random.default_rng(15)
        c, v = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))
        i_idx, j_idx = pair_indices(3)
        dist = np.linalg.norm(c[:, i_idx] - c[:, j_idx], axis=-1)
        p = energy_penalty_general(1.0 / dist, v**2, c, v, "energy_threebody")
        assert p == pytest.approx(0.0, abs=1e-18)

    def test_single_pair_zero_aux(self):
        # aux == 0, one pair at distance 1 and zero velocity: ||0 - 1||^2 = 1
        c = np.zeros((1, 2, 3))
        c[0, 1, 0] = 1.0
        z = np.zeros((1, 2, 3))
        p = energy_penalty_general(np.zeros((1, 1)), np.zeros((1, 2, 3)), c, z, "energy_threebody")
        assert p == pytest.approx(1.0)

    def test_missing_aux_raises(self):
        c = np.zeros((1, 2, 3))
        c[0, 1, 0] = 1.0
        with pytest.raises(ValueError, match="auxiliary"):
            energy_penalty_general(None, None, c, c, "energy_threebody")


class TestEnergyVariancePenalty:
    def test_zero_for_conserved_prediction(self):
        # rigid rotation at fixed radius keeps both energy terms constant
        t = np.linspace(0, 1, 8)
        c = np.zeros((8, 2, 3))
        c[:, 0, 0] = np.cos(t)
        c[:, 0, 1] = np.sin(t)
        c[:, 1, 0] = -np.cos(t)
        c[:, 1, 1] = -np.sin(t)
        v = np.zeros((8, 2, 3))
        v[:, 0, 0] = -np.sin(t)
        v[:, 0, 1] = np.cos(t)
        v[:, 1] = -v[:, 0]
        p = energy_variance_penalty(c, v, np.ones(2), "energy_threebody")
        assert p == pytest.approx(0.0, abs=1e-12)

    def test_positive_for_drifting_energy(self):
        rng = np.random.default_rng(16)
        c = rng.normal(size=(6, 3, 3)) * 2.0
        v = rng.normal(size=(6, 3, 3))
        assert energy_variance_penalty(c, v, np.ones(3), "energy_threebody") > 0


class TestMultilinearPenalty:
    def test_zero_at_solution(self):
        rng = np.random.default_rng(17)
        w = rng.normal(size=(4, 4)) + 4 * np.eye(4)
        u_star = rng.normal(size=4)
        form = MultilinearForm.dense(w, -w @ u_star)
        assert multilinear_penalty(form, u_star) == pytest.approx(0.0, abs=1e-20)

    def test_identity_form_is_squared_distance(self):
        rng = np.random.default_rng(18)
        u_star = rng.normal(size=5)
        u = rng.normal(size=5)
        form = MultilinearForm.dense(np.eye(5), -u_star)
        assert multilinear_penalty(form, u) == pytest.approx(np.sum((u - u_star) ** 2))

    def test_theorem3_identical_minimizer(self):
        # Linear-Gaussian toy: fitting a linear predictor under the
        # multilinear penalty gives the same minimizer as plain MSE when W0
        # is constant and invertible (closed-form normal equations).
        rng = np.random.default_rng(19)
        n, d, m = 40, 3, 4
        phi = rng.normal(size=(n, d))
        u_star = rng.normal(size=(n, m))
        w0 = rng.normal(size=(m, m)) + 3 * np.eye(m)

        # MSE route: Theta minimizes sum ||phi Theta - u*||^2
        theta_mse, *_ = np.linalg.lstsq(phi, u_star, rcond=None)

        # Penalty route via the form machinery: rows b0_i = -W0 u*_i
        gram = np.zeros((d, d))
        rhs = np.zeros((d, m))
        wtw = w0.T @ w0
        for i in range(n):
            form = MultilinearForm.dense(w0, -w0 @ u_star[i])
            # normal equations of ||W0 (Theta^T phi_i) + b0_i||^2 accumulate
            # phi_i phi_i^T Theta W0^T W0 = phi_i u*_i^T W0^T W0
            gram += np.outer(phi[i], phi[i])
            rhs += np.outer(phi[i], u_star[i])
            # form must agree with the residual it encodes
            probe = rng.normal(size=m)
            np.testing.assert_allclose(
                np.asarray(form.apply(probe[None])).ravel(), w0 @ (probe - u_star[i]), atol=1e-10
            )
        theta_pen = np.linalg.solve(gram, rhs @ wtw) @ np.linalg.inv(wtw)
        np.testing.assert_allclose(theta_pen, theta_mse, atol=1e-8)


class TestConstraintSpec:
    def test_valid_combinations(self):
        ConstraintSpec("advection", "linear")
        ConstraintSpec("burgers", "multilinear")
        ConstraintSpec("energy_threebody", "reducible_nonlinear")
        ConstraintSpec("energy_fivespring", "general_nonlinear")
        ConstraintSpec("energy_threebody", "pinn_naive")

    def test_invalid_combination(self):
        with pytest.raises(ValueError, match="contract"):
            ConstraintSpec("advection", "multilinear")
        with pytest.raises(ValueError, match="contract"):
            ConstraintSpec("burgers", "linear")
        with pytest.raises(ValueError, match="contract"):
            ConstraintSpec("nonsense", "linear")
        with pytest.raises(ValueError, match="contract"):
            ConstraintSpec("advection", "linear", weight=-1.0)


class TestTensorPaths:
    """Residuals built on tracked tensors must match numpy and be differentiable."""

    def test_advection_tensor_matches_numpy(self):
        rng = np.random.default_rng(20)
        u = rng.normal(size=(5, 6))
        r_np = advection_residual(u, beta=0.1, dt=0.1, dx=0.2)
        r_t = advection_residual(Tensor(u, requires_grad=True), beta=0.1, dt=0.1, dx=0.2)
        np.testing.assert_allclose(r_t.data, r_np, atol=1e-14)

    def test_penalties_differentiable(self):
        rng = np.random.default_rng(21)
        c = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
        v = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
        ct, vt = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))
        loss = energy_penalty_reducible(c, v, ct, vt, "energy_threebody")
        gc, gv = grad_tensors(loss, [c, v])
        assert np.all(np.isfinite(gc.data)) and np.any(gc.data != 0)
        assert np.all(np.isfinite(gv.data)) and np.any(gv.data != 0)

    def test_momentum_penalty_gradient_vs_fd(self):
        rng = np.random.default_rng(22)
        v0 = rng.normal(size=(4, 3, 2))
        masses = rng.uniform(0.5, 2.0, 3)
        leaf = Tensor(v0, requires_grad=True)
        (g,) = grad_tensors(momentum_penalty(leaf, masses), [leaf])
        h = 1e-6
        fd = np.zeros_like(v0)
        for idx in np.ndindex(v0.shape):
            vp, vm = v0.copy(), v0.copy()
            vp[idx] += h
            vm[idx] -= h
            fd[idx] = (momentum_penalty(vp, masses) - momentum_penalty(vm, masses)) / (2 * h)
        np.testing.assert_allclose(g.data, fd, rtol=1e-5, atol=1e-7)

    def test_shallow_water_tensor_path(self):
        rng = np.random.default_rng(23)
        h = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        u = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        r_u, r_v, r_h = shallow_water_residual(h, u, v, c=1.2, dt=0.1, dx=0.25)
        loss = T.square(r_u).sum() + T.square(r_v).sum() + T.square(r_h).sum()
        gh, gu, gv = grad_tensors(loss, [h, u, v])
        r_np = shallow_water_residual(h.data, u.data, v.data, c=1.2, dt=0.1, dx=0.25)
        np.testing.assert_allclose(r_u.data, r_np[0], atol=1e-14)
        assert np.all(np.isfinite(gh.data))
