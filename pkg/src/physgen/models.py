"""Desk-scale differentiable backbones for noise or data prediction.

Three backbones cover the datasets: a plain MLP on flattened fields, a
weight-shared recurrent net with one mean-aggregated message-passing layer
for particle trajectories (permutation-equivariant by construction), and a
small residual conv net for 2D fields.  Time enters through a sinusoidal
embedding; optional auxiliary heads for the general-nonlinear constraint
case read the shared hidden state (velocities) and symmetrized edge
features (pair distances), never the main output head.
"""
from __future__ import annotations

import numpy as np

from physgen import tensor as T
from physgen.constraints import pair_indices
from physgen.tensor import Tape, Tensor

__all__ = ["ScoreModel", "time_embedding"]


def time_embedding(t_idx, dim=32, steps=1000):
    """Sinusoidal embedding of schedule indices, [B, dim]."""
    t = np.atleast_1d(np.asarray(t_idx, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :] * (1000.0 / steps)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _glorot(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def _mm(x, w, b=None):
    """x[..., F] @ w[F, G] (+ b) as one 2D GEMM regardless of leading axes."""
    lead = x.shape[:-1]
    out = x.reshape((-1, x.shape[-1])) @ w
    if b is not None:
        out = out + b
    return out.reshape(lead + (w.shape[-1],))


class ScoreModel:
    """A parameterized map (x_t, t, condition) -> (main prediction, aux heads).

    predictor_kind tags what the main head estimates (the injected noise or
    the clean sample); the architecture is identical either way.
    """

    def __init__(self, sample_shape, predictor_kind="noise", backbone="mlp",
                 hidden=64, layers=2, msg_dim=16, temb_dim=32, channels=32,
                 blocks=3, condition=None, aux_heads=False, seed=0,
                 final_init="zeros", schedule_steps=1000):
        if predictor_kind not in ("noise", "data"):
            raise ValueError(f"contract violation: predictor_kind {predictor_kind!r}")
        if backbone not in ("mlp", "recurrent", "conv2d"):
            raise ValueError(f"contract violation: backbone {backbone!r}")
        if aux_heads and backbone != "recurrent":
            raise ValueError("contract violation: aux heads require the recurrent backbone")
        self.sample_shape = tuple(sample_shape)
        self.predictor_kind = predictor_kind
        self.backbone = backbone
        self.hidden = hidden
        self.layers = layers
        self.msg_dim = msg_dim
        self.temb_dim = temb_dim
        self.channels = min(channels, 64)
        self.blocks = blocks
        self.condition = condition
        self.aux_heads = aux_heads
        self.schedule_steps = schedule_steps
        self.tape = Tape()
        rng = np.random.default_rng(seed)
        if backbone == "mlp":
            self._build_mlp(rng, final_init)
        elif backbone == "recurrent":
            self._build_recurrent(rng, final_init)
        else:
            self._build_conv(rng, final_init)

    # construction -----------------------------------------------------------
    def _cond_flat_size(self):
        if self.condition is None:
            return 0
        kind = self.condition["kind"]
        if kind == "flat":
            return int(self.condition["size"])
        if kind == "scalar":
            return 1
        raise ValueError(f"contract violation: mlp cannot consume condition {kind!r}")

    def _build_mlp(self, rng, final_init):
        fx = int(np.prod(self.sample_shape))
        fin = fx + self.temb_dim + self._cond_flat_size()
        sizes = [fin] + [self.hidden] * self.layers
        for i in range(self.layers):
            self.tape.parameter(f"w{i}", _glorot(rng, sizes[i], sizes[i + 1]))
            self.tape.parameter(f"b{i}", np.zeros(sizes[i + 1]))
        last = sizes[-1]  # layers=0 gives a purely linear model
        wout = (
            np.zeros((last, fx)) if final_init == "zeros" else _glorot(rng, last, fx)
        )
        self.tape.parameter("w_out", wout)
        self.tape.parameter("b_out", np.zeros(fx))

    def _build_recurrent(self, rng, final_init):
        l, k, f = self.sample_shape  # [L, K, 2D]
        self.n_particles = k
        self.dim = f // 2
        h, dm = self.hidden, self.msg_dim
        self.tape.parameter("w_edge_dst", _glorot(rng, f, dm))
        self.tape.parameter("w_edge_src", _glorot(rng, f, dm))
        self.tape.parameter("b_edge", np.zeros(dm))
        fin = f + dm + self.temb_dim
        for gate in ("z", "r", "n"):
            self.tape.parameter(f"w_{gate}", _glorot(rng, fin, h))
            self.tape.parameter(f"u_{gate}", _glorot(rng, h, h))
            self.tape.parameter(f"b_{gate}", np.zeros(h))
        wout = np.zeros((h, f)) if final_init == "zeros" else _glorot(rng, h, f)
        self.tape.parameter("w_out", wout)
        self.tape.parameter("b_out", np.zeros(f))
        if self.aux_heads:
            self.tape.parameter("w_vel", _glorot(rng, h, self.dim))
            self.tape.parameter("b_vel", np.zeros(self.dim))
            self.tape.parameter("w_pair", _glorot(rng, dm, 1))
            self.tape.parameter("b_pair", np.zeros(1))
        # ordered neighbor layout [K, K-1]: dst particle i attends src j != i
        src = np.array([[j for j in range(k) if j != i] for i in range(k)])
        self._src_idx = src
        self._pair_i, self._pair_j = pair_indices(k)

    def _build_conv(self, rng, final_init):
        c_in = self.sample_shape[0]
        if self.condition is not None:
            kind = self.condition["kind"]
            if kind == "channels":
                c_in += int(self.condition["shape"][0])
            elif kind == "scalar":
                c_in += 1
            else:
                raise ValueError(f"contract violation: conv cannot consume condition {kind!r}")
        c = self.channels
        self.tape.parameter("stem_w", rng.standard_normal((c, c_in, 3, 3)) / np.sqrt(9 * c_in))
        self.tape.parameter("stem_b", np.zeros(c))
        self.tape.parameter("temb_w", _glorot(rng, self.temb_dim, c))
        self.tape.parameter("temb_b", np.zeros(c))
        for i in range(self.blocks):
            for j in (1, 2):
                self.tape.parameter(
                    f"blk{i}_w{j}", rng.standard_normal((c, c, 3, 3)) / np.sqrt(9 * c)
                )
                self.tape.parameter(f"blk{i}_b{j}", np.zeros(c))
        c_out = self.sample_shape[0]
        wout = (
            np.zeros((c_out, c, 3, 3))
            if final_init == "zeros"
            else rng.standard_normal((c_out, c, 3, 3)) / np.sqrt(9 * c)
        )
        self.tape.parameter("head_w", wout)
        self.tape.parameter("head_b", np.zeros(c_out))

    # forward ------------------------------------------------------------------
    def forward(self, xt, t_idx, condition=None):
        """Deterministic prediction for a batch.

        xt: [B, *sample_shape]; t_idx: int or [B] schedule indices;
        condition present iff the model was configured with one.
        Returns (main [B, *sample_shape], aux dict).
        """
        x = xt if isinstance(xt, Tensor) else Tensor(np.asarray(xt, dtype=np.float64))
        if x.shape[1:] != self.sample_shape:
            raise ValueError(
                f"shape mismatch: expected [B, {self.sample_shape}], got {x.shape}"
            )
        if (condition is None) != (self.condition is None):
            raise ValueError("contract violation: condition presence mismatch")
        b = x.shape[0]
        t_arr = np.broadcast_to(np.atleast_1d(t_idx), (b,))
        temb = time_embedding(t_arr, self.temb_dim, self.schedule_steps)
        if self.backbone == "mlp":
            return self._forward_mlp(x, temb, condition), {}
        if self.backbone == "recurrent":
            return self._forward_recurrent(x, temb, condition)
        return self._forward_conv(x, temb, condition), {}

    __call__ = forward

    def _forward_mlp(self, x, temb, condition):
        b = x.shape[0]
        fx = int(np.prod(self.sample_shape))
        parts = [x.reshape((b, fx)), Tensor(temb)]
        if condition is not None:
            cond = np.asarray(condition, dtype=np.float64).reshape(b, -1)
            parts.insert(1, Tensor(cond))
        h = T.concat(parts, axis=1)
        p = self.tape
        for i in range(self.layers):
            h = T.tanh(h @ p[f"w{i}"] + p[f"b{i}"])
        out = h @ p["w_out"] + p["b_out"]
        return out.reshape((b,) + self.sample_shape)

    def _gru_cell(self, u, h):
        p = self.tape
        z = T.sigmoid(u @ p["w_z"] + h @ p["u_z"] + p["b_z"])
        r = T.sigmoid(u @ p["w_r"] + h @ p["u_r"] + p["b_r"])
        n = T.tanh(u @ p["w_n"] + (r * h) @ p["u_n"] + p["b_n"])
        return (1.0 - z) * n + z * h

    def _forward_recurrent(self, x, temb, condition):
        # input-side work (edge features, gate pre-activations, heads) is
        # batched over all L steps; only the hidden recursion loops
        p = self.tape
        b = x.shape[0]
        l, k, f = self.sample_shape
        src = self._src_idx  # [K, K-1]
        if condition is not None:
            adj = np.asarray(condition, dtype=np.float64).reshape(b, k, k)
            mask = np.stack([adj[:, i, src[i]] for i in range(k)], axis=1)  # [B,K,K-1]
            deg = np.maximum(mask.sum(axis=2, keepdims=True), 1.0)
        else:
            mask = np.ones((b, k, k - 1))
            deg = np.full((b, k, 1), float(k - 1))

        # edge features for ordered (dst, src) pairs; the dst projection is
        # computed once per particle and broadcast across its K-1 sources
        xi = T.take(x, src, axis=2)  # [B, L, K, K-1, F]
        src_proj = _mm(xi, p["w_edge_src"])
        dst_proj = _mm(x, p["w_edge_dst"]).reshape((b, l, k, 1, self.msg_dim))
        e_all = T.tanh(src_proj + dst_proj + p["b_edge"])
        msg = (e_all * mask[:, None, :, :, None]).sum(axis=3) * (1.0 / deg[:, None])
        temb_b = np.broadcast_to(temb[:, None, None, :], (b, l, k, temb.shape[1]))
        u_all = T.concat([x, msg, Tensor(temb_b)], axis=3)  # [B, L, K, fin]
        pre = {
            g: _mm(u_all, p[f"w_{g}"], p[f"b_{g}"]).reshape((b, l, k * self.hidden))
            for g in ("z", "r", "n")
        }

        h = Tensor(np.zeros((b * k, self.hidden)))
        hs = []
        for step in range(l):
            pz = pre["z"][:, step].reshape((b * k, self.hidden))
            pr_ = pre["r"][:, step].reshape((b * k, self.hidden))
            pn = pre["n"][:, step].reshape((b * k, self.hidden))
            z = T.sigmoid(pz + h @ p["u_z"])
            r = T.sigmoid(pr_ + h @ p["u_r"])
            n = T.tanh(pn + (r * h) @ p["u_n"])
            h = (1.0 - z) * n + z * h
            hs.append(h.reshape((b, 1, k, self.hidden)))
        h_all = T.concat(hs, axis=1)  # [B, L, K, H]
        main = _mm(h_all, p["w_out"], p["b_out"])
        aux = {}
        if self.aux_heads:
            aux["sq_vel"] = _mm(h_all, p["w_vel"], p["b_vel"])  # [B, L, K, D]
            e_flat = e_all.reshape((b, l, k * (k - 1), self.msg_dim))
            fwd = self._ordered_pos(self._pair_i, self._pair_j)
            rev = self._ordered_pos(self._pair_j, self._pair_i)
            e_sym = T.take(e_flat, fwd, axis=2) + T.take(e_flat, rev, axis=2)
            pair = _mm(e_sym, p["w_pair"], p["b_pair"])  # [B, L, P, 1]
            aux["pair_feature"] = pair.reshape((b, l, len(fwd)))
        return main, aux

    def _ordered_pos(self, a_idx, b_idx):
        """Flat positions of ordered pairs (a -> dst row a, src b) in [K, K-1]."""
        k = self.n_particles
        pos = []
        for a, bb in zip(a_idx, b_idx):
            row = [j for j in range(k) if j != a]
            pos.append(a * (k - 1) + row.index(bb))
        return np.asarray(pos)

    # conv pieces ---------------------------------------------------------------
    def _conv3x3(self, x, w_name, b_name):
        p = self.tape
        w = p[w_name]
        c_out, c_in, kh, kw = w.shape
        b, c, hh, ww = x.shape
        zrow = Tensor(np.zeros((b, c, 1, ww)))
        xpad = T.concat([zrow, x, zrow], axis=2)
        zcol = Tensor(np.zeros((b, c, hh + 2, 1)))
        xpad = T.concat([zcol, xpad, zcol], axis=3)
        hp, wp = hh + 2, ww + 2
        key = (c, hh, ww)
        cache = getattr(self, "_im2col_cache", {})
        if key not in cache:
            ci, ki, kj = np.meshgrid(np.arange(c), np.arange(3), np.arange(3), indexing="ij")
            base = (ci * hp + ki) * wp + kj  # [C, 3, 3]
            oi, oj = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
            offset = (oi * wp + oj).reshape(-1)  # [H*W]
            cache[key] = base.reshape(-1, 1) + offset[None, :]  # [C*9, H*W]
            self._im2col_cache = cache
        idx = cache[key]
        cols = T.take(xpad.reshape((b, c * hp * wp)), idx, axis=1)  # [B, C*9, H*W]
        wt = w.reshape((c_out, c_in * 9))
        out = wt @ cols  # [B, c_out, H*W] via batch broadcast
        return out.reshape((b, c_out, hh, ww)) + p[b_name].reshape((1, c_out, 1, 1))

    def _forward_conv(self, x, temb, condition):
        p = self.tape
        b = x.shape[0]
        if condition is not None:
            kind = self.condition["kind"]
            if kind == "channels":
                cond = np.asarray(condition, dtype=np.float64).reshape(
                    (b,) + tuple(self.condition["shape"])
                )
            else:  # scalar broadcast as a constant plane
                plane = np.asarray(condition, dtype=np.float64).reshape(b, 1, 1, 1)
                cond = np.broadcast_to(plane, (b, 1) + self.sample_shape[1:])
            x = T.concat([x, Tensor(cond)], axis=1)
        h = self._conv3x3(x, "stem_w", "stem_b")
        bias = (Tensor(temb) @ p["temb_w"] + p["temb_b"]).reshape((b, self.channels, 1, 1))
        h = h + T.broadcast_to(bias, h.shape)
        for i in range(self.blocks):
            y = self._conv3x3(T.relu(h), f"blk{i}_w1", f"blk{i}_b1")
            y = self._conv3x3(T.relu(y), f"blk{i}_w2", f"blk{i}_b2")
            h = h + y
        return self._conv3x3(T.relu(h), "head_w", "head_b")

    # parameter plumbing --------------------------------------------------------
    def state(self):
        return self.tape.state()

    def load_state(self, state):
        self.tape.load_state(state)
