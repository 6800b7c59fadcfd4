"""Combined objective J = J_match + lambda * J_constraint, optimizer, loop.

The matching term is the Monte-Carlo noise- or data-matching loss with
w(t) = g^2(t) weighting and uniform discrete time sampling.  For models
trained with a constraint, the penalty dispatches on the constraint case:
direct residuals for linear/convex, the frozen-factor affine form for
multilinear, elementary reparameterizations against ground truth for
reducible-nonlinear, auxiliary-head regression for general-nonlinear, and
the naive energy-variance arm kept for the ablation study.  Noise-matching
models are converted to data space before any penalty is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from physgen import constraints as C
from physgen import tensor as T
from physgen.augment import draw_permutation, draw_rotation, permute_batch, rotate_translate_batch
from physgen.constraints import ConstraintSpec
from physgen.data import FieldSample, TrajectorySample
from physgen.diffusion import build_schedule, data_from_noise
from physgen.models import ScoreModel
from physgen.tensor import Tensor, grad

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainingDiverged",
    "Adam",
    "ReduceLROnPlateau",
    "dataset_arrays",
    "build_model",
    "matching_loss",
    "penalty_loss",
    "train",
    "sample_from_checkpoint",
    "rebuild_model",
]

PARTICLE_FAMILIES = ("threebody", "fivespring")
FIELD_FAMILIES = ("advection", "burgers", "shallow_water", "darcy")

# Remark-1 defaults: noise matching for invariant particle distributions,
# data matching for smooth PDE fields.
_DEFAULT_PREDICTOR = {
    "threebody": "noise",
    "fivespring": "noise",
    "advection": "data",
    "burgers": "data",
    "shallow_water": "data",
    "darcy": "data",
}

_DEFAULT_BACKBONE = {
    "threebody": "recurrent",
    "fivespring": "recurrent",
    "advection": "mlp",
    "burgers": "mlp",
    "shallow_water": "conv2d",
    "darcy": "conv2d",
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    family: str
    predictor: str = "auto"
    constraint: ConstraintSpec | None = None
    batch_size: int = 64
    epochs: int = 200
    lr: float = 1e-3
    betas: tuple = (0.95, 0.999)
    plateau_factor: float = 0.6
    plateau_patience: int = 10
    min_lr_stop: float = 5e-7
    augment: tuple = ()          # subset of ("se_n", "permutation")
    hidden: int = 64
    layers: int = 2
    msg_dim: int = 16
    channels: int = 32
    blocks: int = 3
    temb_dim: int = 32
    schedule_steps: int = 1000
    schedule_lo: float = -5.0
    schedule_hi: float = 5.0
    predict_frames: int = 0      # >0: condition on leading frames (advection)
    fixed_t: int | None = None   # diagnostic: pin the matching-loss time index
    seed: int = 0

    def __post_init__(self):
        if self.family not in PARTICLE_FAMILIES + FIELD_FAMILIES:
            raise ValueError(f"contract violation: unknown family {self.family!r}")
        if self.predictor == "auto":
            self.predictor = _DEFAULT_PREDICTOR[self.family]
        if self.predictor not in ("noise", "data"):
            raise ValueError(f"contract violation: predictor {self.predictor!r}")
        if self.constraint is not None and self.constraint.weight < 0:
            raise ValueError("contract violation: lambda must be >= 0")
        for a in self.augment:
            if a not in ("se_n", "permutation"):
                raise ValueError(f"contract violation: augmentation {a!r}")

    def to_dict(self):
        d = asdict(self)
        if self.constraint is not None:
            d["constraint"] = {
                "family": self.constraint.family,
                "case_tag": self.constraint.case_tag,
                "params": dict(self.constraint.params),
                "weight": self.constraint.weight,
            }
        d["augment"] = list(self.augment)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("constraint"):
            d["constraint"] = ConstraintSpec(**d["constraint"])
        d["augment"] = tuple(d.get("augment", ()))
        d["betas"] = tuple(d.get("betas", (0.95, 0.999)))
        return cls(**d)


@dataclass
class Checkpoint:
    params: dict
    config: dict
    epoch: int
    rng_state: dict
    data_scale: float
    meta: dict = field(default_factory=dict)
    loss_curves: list = field(default_factory=list)


class Adam:
    def __init__(self, tape, lr=1e-3, betas=(0.95, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in tape.items()}
        self.v = {k: np.zeros(v.shape) for k, v in tape.items()}

    def step(self, tape, grads):
        self.t += 1
        for name, g in grads.items():
            gd = g.data if isinstance(g, Tensor) else g
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * gd
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * gd * gd
            mhat = self.m[name] / (1 - self.b1**self.t)
            vhat = self.v[name] / (1 - self.b2**self.t)
            tape.assign(name, tape[name].data - self.lr * mhat / (np.sqrt(vhat) + self.eps))


class ReduceLROnPlateau:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr, factor=0.6, patience=10, rel_threshold=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.rel = rel_threshold
        self.best = np.inf
        self.wait = 0

    def step(self, loss):
        if loss < self.best * (1.0 - self.rel):
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait > self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


# dataset adapters -------------------------------------------------------------

def dataset_arrays(family, samples, predict_frames=0):
    """Stack a list of samples into the arrays the loop consumes."""
    if not samples:
        raise ValueError("contract violation: dataset is empty")
    if family in PARTICLE_FAMILIES:
        c = np.stack([s.c for s in samples])
        v = np.stack([s.v for s in samples])
        arr = {
            "x0": np.concatenate([c, v], axis=-1),
            "c": c,
            "v": v,
            "masses": samples[0].masses.copy(),
            "constant": samples[0].constant,
            "dt": samples[0].dt,
        }
        if family == "fivespring":
            arr["edges"] = np.stack([s.edges for s in samples]).astype(np.float64)
            arr["condition"] = arr["edges"]
        else:
            arr["condition"] = None
        return arr
    if family in ("advection", "burgers"):
        u = np.stack([s.data for s in samples])
        arr = {"x0": u, "dt": samples[0].dt, "dx": samples[0].dx, "condition": None}
        if family == "advection":
            arr["beta"] = samples[0].params["beta"]
        if predict_frames:
            arr["condition"] = u[:, :predict_frames].reshape(len(samples), -1)
            arr["x0"] = u[:, predict_frames:]
            arr["full"] = u
        return arr
    if family == "shallow_water":
        data = np.stack([s.data for s in samples])  # [n, 3, T, H, W]
        n, _, t, hh, ww = data.shape
        return {
            "x0": data.reshape(n, 3 * t, hh, ww),
            "frames": t,
            "condition": np.array([s.params["c"] for s in samples]),
            "dt": samples[0].dt,
            "dx": samples[0].dx,
            "dy": samples[0].dy,
        }
    if family == "darcy":
        u = np.stack([s.data if s.data.ndim == 2 else s.data[-1] for s in samples])
        a = np.stack([s.params["a"] for s in samples])
        n, hh, ww = u.shape
        return {
            "x0": u[:, None, :, :],
            "condition": a[:, None, :, :],
            "a": a,
            "f_const": samples[0].params.get("f_const", 1.0),
            "dx": samples[0].dx,
        }
    raise ValueError(f"contract violation: unknown family {family!r}")


def build_model(config: TrainConfig, arrays) -> ScoreModel:
    family = config.family
    backbone = _DEFAULT_BACKBONE[family]
    x0 = arrays["x0"]
    sample_shape = x0.shape[1:]
    condition = None
    if family == "fivespring":
        condition = {"kind": "adjacency"}
    elif family == "shallow_water":
        condition = {"kind": "scalar"}
    elif family == "darcy":
        condition = {"kind": "channels", "shape": arrays["condition"].shape[1:]}
    elif arrays.get("condition") is not None:
        condition = {"kind": "flat", "size": arrays["condition"].shape[1]}
    aux = (
        config.constraint is not None
        and config.constraint.case_tag == "general_nonlinear"
    )
    return ScoreModel(
        sample_shape,
        predictor_kind=config.predictor,
        backbone=backbone,
        hidden=config.hidden,
        layers=config.layers,
        msg_dim=config.msg_dim,
        channels=config.channels,
        blocks=config.blocks,
        temb_dim=config.temb_dim,
        condition=condition,
        aux_heads=aux,
        seed=config.seed,
        schedule_steps=config.schedule_steps,
    )


# losses ------------------------------------------------------------------------

def matching_loss(model, x0, sched, rng, condition=None, t=None, eps=None,
                  return_parts=False):
    """Monte-Carlo noise/data matching over a batch (scaled space).

    t defaults to uniform discrete indices, eps to standard normals; both are
    overridable so tests can pin the draw.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    if t is None:
        t = rng.integers(0, sched.steps, size=b)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    expand = (slice(None),) + (None,) * (x0.ndim - 1)
    alpha = sched.alpha[t][expand]
    sigma = sched.sigma[t][expand]
    xt = alpha * x0 + sigma * eps
    pred, aux = model.forward(xt, t, condition)
    target = eps if model.predictor_kind == "noise" else x0
    axes = tuple(range(1, x0.ndim))
    per_sample = T.square(pred - Tensor(target)).sum(axis=axes)
    w = sched.weight[t]
    loss = (per_sample * w).mean()
    if return_parts:
        return loss, {"pred": pred, "aux": aux, "t": t, "eps": eps, "xt": xt, "w": w}
    return loss


def _as_data_prediction(parts, sched, scale):
    """Physical-space clean-sample estimate from the model's main head."""
    t = parts["t"]
    expand = (slice(None),) + (None,) * (parts["pred"].ndim - 1)
    alpha = sched.alpha[t][expand]
    sigma = sched.sigma[t][expand]
    if parts["kind"] == "noise":
        x0_hat = (Tensor(parts["xt"]) - sigma * parts["pred"]) * (1.0 / alpha)
    else:
        x0_hat = parts["pred"]
    return x0_hat * (1.0 / scale)


def penalty_loss(parts, batch, constraint: ConstraintSpec, sched, scale=1.0):
    """Constraint penalty for one batch, dispatched on the taxonomy case.

    parts comes from matching_loss(return_parts=True) plus the predictor
    kind; batch holds the physical-space ground truth and grid/particle
    metadata.  Returns the w(t)-weighted batch mean (unscaled by lambda).
    """
    w = parts["w"]
    fam = constraint.family
    case = constraint.case_tag
    if case == "general_nonlinear":
        aux = parts["aux"]
        pen = C.energy_penalty_general(
            aux.get("pair_feature"), aux.get("sq_vel"),
            batch["c"], batch["v"], fam, pair_mask=batch.get("pair_mask"),
        )
        return (pen * w).mean()

    x0_hat = _as_data_prediction(parts, sched, scale)
    if fam == "advection":
        r = C.advection_residual(
            x0_hat, beta=batch["beta"], dt=batch["dt"], dx=batch["dx"]
        )
        pen = T.square(r).sum(axis=(-1, -2))
    elif fam == "darcy":
        f = np.full(batch["a"].shape[-2:], batch.get("f_const", 1.0))
        r = C.darcy_residual(
            x0_hat.reshape(batch["a"].shape), batch["a"], f, dx=batch["dx"], steady=True
        )
        pen = T.square(r).sum(axis=(-1, -2))
    elif fam == "shallow_water":
        b = x0_hat.shape[0]
        t_frames = batch["frames"]
        hh, ww = x0_hat.shape[-2:]
        fields = x0_hat.reshape((b, 3, t_frames, hh, ww))
        c_arr = np.asarray(batch["c_values"]).reshape(b, 1, 1, 1)
        r_u, r_v, r_h = C.shallow_water_residual(
            fields[:, 0], fields[:, 1], fields[:, 2],
            c=c_arr, dt=batch["dt"], dx=batch["dx"], dy=batch["dy"],
        )
        pen = (
            T.square(r_u).sum(axis=(-1, -2, -3))
            + T.square(r_v).sum(axis=(-1, -2, -3))
            + T.square(r_h).sum(axis=(-1, -2, -3))
        )
    elif fam == "burgers":
        form = C.burgers_multilinear_form(batch["u_true"], dt=batch["dt"], dx=batch["dx"])
        pen = C.multilinear_penalty(form, x0_hat)
    elif fam == "momentum":
        d = batch["c"].shape[-1]
        v_hat = x0_hat[..., d:]
        pen = C.momentum_penalty(v_hat, batch["masses"])
    elif fam in ("energy_threebody", "energy_fivespring"):
        d = batch["c"].shape[-1]
        c_hat, v_hat = x0_hat[..., :d], x0_hat[..., d:]
        if case == "reducible_nonlinear":
            pen = C.energy_penalty_reducible(
                c_hat, v_hat, batch["c"], batch["v"], fam,
                pair_mask=batch.get("pair_mask"),
            )
        elif case == "pinn_naive":
            pen = C.energy_variance_penalty(
                c_hat, v_hat, batch["masses"], fam,
                constant=batch.get("constant", 1.0),
                pair_mask=batch.get("pair_mask"),
            )
        else:
            raise ValueError(f"contract violation: case {case!r} for {fam!r}")
    else:
        raise ValueError(f"contract violation: unknown constraint family {fam!r}")
    return (pen * w).mean()


def _edge_pair_mask(edges):
    k = edges.shape[-1]
    i_idx, j_idx = C.pair_indices(k)
    return edges[..., i_idx, j_idx]


def _make_batch_meta(config, arrays, idx, x0_phys, cond):
    """Physical-space ground truth the penalty needs for one batch."""
    fam = config.family
    meta = {}
    if fam in PARTICLE_FAMILIES:
        d = arrays["c"].shape[-1]
        meta["c"] = x0_phys[..., :d]
        meta["v"] = x0_phys[..., d:]
        meta["masses"] = arrays["masses"]
        meta["constant"] = arrays["constant"]
        if fam == "fivespring":
            meta["pair_mask"] = _edge_pair_mask(arrays["edges"][idx])
    elif fam == "advection":
        meta.update(beta=arrays["beta"], dt=arrays["dt"], dx=arrays["dx"])
    elif fam == "burgers":
        meta.update(u_true=x0_phys, dt=arrays["dt"], dx=arrays["dx"])
    elif fam == "shallow_water":
        meta.update(
            frames=arrays["frames"], c_values=arrays["condition"][idx],
            dt=arrays["dt"], dx=arrays["dx"], dy=arrays["dy"],
        )
    elif fam == "darcy":
        meta.update(a=arrays["a"][idx], f_const=arrays["f_const"], dx=arrays["dx"])
    return meta


def _augment_particles(config, x0, cond, rng):
    d = x0.shape[-1] // 2
    c = x0[..., :d].copy()
    v = x0[..., d:].copy()
    b = x0.shape[0]
    if "se_n" in config.augment:
        rots = np.stack([draw_rotation(d, rng) for _ in range(b)])
        shifts = rng.standard_normal((b, d))
        c, v = rotate_translate_batch(c, v, rots, shifts)
    if "permutation" in config.augment:
        k = x0.shape[2]
        perms = np.stack([draw_permutation(k, rng) for _ in range(b)])
        c = permute_batch(c, perms)
        v = permute_batch(v, perms)
        if cond is not None:
            cond = np.stack(
                [cond[i][np.ix_(perms[i], perms[i])] for i in range(b)]
            )
    return np.concatenate([c, v], axis=-1), cond


def train(config: TrainConfig, dataset) -> Checkpoint:
    """Run the training loop and return a reloadable checkpoint."""
    arrays = dataset if isinstance(dataset, dict) else dataset_arrays(
        config.family, dataset, config.predict_frames
    )
    n = arrays["x0"].shape[0]
    if n == 0:
        raise ValueError("contract violation: dataset is empty")
    sched = build_schedule(config.schedule_steps, config.schedule_lo, config.schedule_hi)
    model = build_model(config, arrays)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC0FFEE)))
    scale = 1.0 / max(float(arrays["x0"].std()), 1e-8)
    adam = Adam(model.tape, lr=config.lr, betas=config.betas)
    plateau = ReduceLROnPlateau(
        config.lr, config.plateau_factor, config.plateau_patience
    )
    lam = 0.0 if config.constraint is None else config.constraint.weight
    curves = []
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        tot = m_sum = p_sum = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0_phys = arrays["x0"][idx]
            cond = None if arrays.get("condition") is None else arrays["condition"][idx]
            if config.family in PARTICLE_FAMILIES and config.augment:
                x0_phys, cond = _augment_particles(config, x0_phys, cond, rng)
            batch = _make_batch_meta(config, arrays, idx, x0_phys, cond)
            x0_scaled = x0_phys * scale
            t_pin = None
            if config.fixed_t is not None:
                t_pin = np.full(len(idx), config.fixed_t)
            loss, parts = matching_loss(
                model, x0_scaled, sched, rng, condition=cond, t=t_pin,
                return_parts=True,
            )
            parts["kind"] = model.predictor_kind
            match_val = loss.item()
            pen_val = 0.0
            if lam > 0.0:
                pen = penalty_loss(parts, batch, config.constraint, sched, scale)
                pen_val = pen.item()
                loss = loss + lam * pen
            total_val = loss.item()
            if not np.isfinite(total_val):
                raise TrainingDiverged(
                    f"numerical failure at epoch {epoch}: "
                    f"match={match_val:.3e} penalty={pen_val:.3e}"
                )
            grads = grad(loss, model.tape)
            adam.step(model.tape, grads)
            tot += total_val
            m_sum += match_val
            p_sum += pen_val
            n_batches += 1
        curves.append(
            {
                "epoch": epoch,
                "total": tot / n_batches,
                "match": m_sum / n_batches,
                "penalty": p_sum / n_batches,
                "lr": adam.lr,
            }
        )
        adam.lr = plateau.step(tot / n_batches)
        if adam.lr < config.min_lr_stop:
            break
    meta = {
        "family": config.family,
        "sample_shape": list(model.sample_shape),
        "predictor": model.predictor_kind,
    }
    for key in ("dt", "dx", "dy", "beta", "frames", "f_const", "constant"):
        if key in arrays and np.isscalar(arrays[key]):
            meta[key] = float(arrays[key])
    if "masses" in arrays:
        meta["masses"] = arrays["masses"].tolist()
    return Checkpoint(
        params=model.state(),
        config=config.to_dict(),
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        data_scale=scale,
        meta=meta,
        loss_curves=curves,
    )


def rebuild_model(ckpt: Checkpoint) -> ScoreModel:
    config = TrainConfig.from_dict(ckpt.config)
    shape = tuple(ckpt.meta["sample_shape"])
    dummy = {"x0": np.zeros((1,) + shape)}
    if config.family == "fivespring":
        dummy["condition"] = np.zeros((1, shape[1], shape[1]))
    elif config.family == "shallow_water":
        dummy["condition"] = np.zeros(1)
    elif config.family == "darcy":
        dummy["condition"] = np.zeros((1, 1) + shape[-2:])
    elif config.predict_frames:
        size = config.predict_frames * shape[-1]
        dummy["condition"] = np.zeros((1, size))
    else:
        dummy["condition"] = None
    model = build_model(config, dummy)
    model.load_state(ckpt.params)
    return model


def sample_from_checkpoint(ckpt: Checkpoint, n, sampler="dpm1", steps=20,
                           conditions=None, seed=0):
    """Draw n generated samples in physical units.

    Conditional families need a conditions array of length n (adjacency,
    wave speed, permeability field, or conditioning frames).
    """
    from physgen.samplers import sample_dpm1, sample_dpm3, sample_ode

    config = TrainConfig.from_dict(ckpt.config)
    model = rebuild_model(ckpt)
    sched = build_schedule(config.schedule_steps, config.schedule_lo, config.schedule_hi)
    shape = (n,) + tuple(ckpt.meta["sample_shape"])
    needs_cond = model.condition is not None
    if needs_cond and conditions is None:
        raise ValueError("contract violation: this model requires conditions")
    if not needs_cond:
        conditions = None
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A11)))
    fn = {"ode_euler": sample_ode, "dpm1": sample_dpm1, "dpm3": sample_dpm3}[sampler]
    kw = {"steps": steps} if sampler == "ode_euler" else {"m": steps}
    out = fn(model, sched, shape, condition=conditions, rng=rng, **kw)
    return out / ckpt.data_scale
