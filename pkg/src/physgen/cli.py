"""Command-line surface: gen-data / train / sample / eval / plot.

Every command accepts --config pointing at a JSON document whose keys mirror
the flags (unknown keys are rejected); explicit flags override the file.
Each run writes a resolved-config copy next to its primary output so any
artifact can be reproduced.  Exit codes: 0 success, 2 usage or config error,
3 runtime numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from physgen import constraints as C
from physgen import container as box
from physgen import metrics as M
from physgen import simulate as sim
from physgen import svgplot
from physgen.constraints import ConstraintSpec
from physgen.data import TrajectorySample
from physgen.train import Checkpoint, TrainConfig, TrainingDiverged, sample_from_checkpoint, train

__all__ = ["main"]


class ConfigError(ValueError):
    pass


GENERATORS = {
    "threebody": sim.gen_threebody,
    "fivespring": sim.gen_fivespring,
    "advection": sim.gen_advection,
    "burgers": sim.gen_burgers,
    "shallow_water": sim.gen_shallow_water,
    "darcy": sim.gen_darcy,
}


def _build_parser():
    p = argparse.ArgumentParser(prog="physgen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a ground-truth dataset")
    g.add_argument("--config")
    g.add_argument("--family", choices=sorted(GENERATORS))
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--nt", type=int)
    g.add_argument("--nx", type=int)
    g.add_argument("--grid", type=int)
    g.add_argument("--beta", type=float)

    t = sub.add_parser("train", help="train a diffusion model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--predictor", choices=["auto", "noise", "data"])
    t.add_argument("--constraint", help="constraint family, e.g. momentum")
    t.add_argument("--case", help="constraint case tag")
    t.add_argument("--lam", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--augment", help="comma list: se_n,permutation")
    t.add_argument("--predict-frames", type=int)
    t.add_argument("--seed", type=int)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--n", type=int)
    s.add_argument("--out")
    s.add_argument("--sampler", choices=["ode_euler", "dpm1", "dpm3"])
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--conditions-from", help="dataset file supplying conditions")

    e = sub.add_parser("eval", help="score a samples file")
    e.add_argument("--config")
    e.add_argument("--samples")
    e.add_argument("--out")
    e.add_argument("--reference", help="reference dataset for prediction RMSE")

    pl = sub.add_parser("plot", help="render SVG diagnostics")
    pl.add_argument("--config")
    pl.add_argument("--input")
    pl.add_argument("--out")
    pl.add_argument("--kind", choices=["conserved", "trajectory", "field", "loss"])
    pl.add_argument("--index", type=int)
    pl.add_argument("--frame", type=int)
    return p


def _resolve(args, defaults):
    """Merge config file < flags, validate keys, apply defaults."""
    merged = dict(defaults)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _require(cfg, *names):
    for name in names:
        if cfg.get(name) is None:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")


def _write_resolved(out_path, cfg):
    with open(str(out_path) + ".config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _cmd_gen_data(args):
    defaults = dict(family=None, n=None, seed=0, out=None, nt=None, nx=None,
                    grid=None, beta=None)
    cfg = _resolve(args, defaults)
    _require(cfg, "family", "n", "out")
    kwargs = {"seed": cfg["seed"]}
    fam = cfg["family"]
    if fam in ("advection", "burgers"):
        if cfg["nt"]:
            kwargs["nt"] = cfg["nt"]
        if cfg["nx"]:
            kwargs["nx"] = cfg["nx"]
        if fam == "advection" and cfg["beta"] is not None:
            kwargs["beta"] = cfg["beta"]
    elif fam == "shallow_water" and cfg["grid"]:
        kwargs["nh"] = kwargs["nw"] = cfg["grid"]
    elif fam == "darcy" and cfg["grid"]:
        kwargs["grid"] = cfg["grid"]
    samples = GENERATORS[fam](cfg["n"], **kwargs)
    meta = {"seed": cfg["seed"], "provenance": {"generator": fam, "options": kwargs}}
    box.dataset_to_container(cfg["out"], fam, samples, meta)
    _write_resolved(cfg["out"], cfg)
    _print_dataset_summary(fam, samples)
    return 0


def _print_dataset_summary(fam, samples):
    if fam in ("threebody", "fivespring"):
        drifts, moms = [], []
        for s in samples[: min(len(samples), 50)]:
            if fam == "threebody":
                e = C.threebody_energy(s.c, s.v, s.masses, s.constant)
            else:
                e = C.fivespring_energy(s.c, s.v, s.masses, s.constant, s.edges)
            drifts.append(np.max(np.abs(e - e[0]) / max(abs(e[0]), 1e-12)))
            p = C.total_momentum(s.v, s.masses)
            moms.append(np.max(np.linalg.norm(p - p[0], axis=-1)))
        print(f"{fam}: {len(samples)} samples, "
              f"max relative energy drift {max(drifts):.2e}, "
              f"max momentum drift {max(moms):.2e}")
    else:
        rmse = M.pde_residual_rmse(samples[: min(len(samples), 50)], fam)
        print(f"{fam}: {len(samples)} samples, residual RMSE {rmse:.4f}")


def _cmd_train(args):
    defaults = dict(data=None, out=None, predictor="auto", constraint=None,
                    case=None, lam=0.1, epochs=60, batch_size=64, hidden=64,
                    layers=2, augment=None, predict_frames=0, seed=0)
    cfg = _resolve(args, defaults)
    _require(cfg, "data", "out")
    family, samples, _ = box.container_to_dataset(cfg["data"])
    spec = None
    if cfg["constraint"]:
        if not cfg["case"]:
            raise ConfigError("--case is required with --constraint")
        spec = ConstraintSpec(cfg["constraint"], cfg["case"], weight=cfg["lam"])
    augment = tuple(a for a in (cfg["augment"] or "").split(",") if a)
    tc = TrainConfig(
        family=family,
        predictor=cfg["predictor"],
        constraint=spec,
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        hidden=cfg["hidden"],
        layers=cfg["layers"],
        augment=augment,
        predict_frames=cfg["predict_frames"],
        seed=cfg["seed"],
    )
    ckpt = train(tc, samples)
    box.checkpoint_to_container(cfg["out"], ckpt)
    _write_resolved(cfg["out"], cfg)
    rows = [("epoch", "total", "match", "penalty", "lr")]
    for cur in ckpt.loss_curves:
        rows.append(tuple(repr(cur[k]) for k in ("epoch", "total", "match", "penalty", "lr")))
    svgplot.write_csv(str(cfg["out"]) + ".loss.csv", rows)
    last = ckpt.loss_curves[-1]
    print(f"trained {family} for {ckpt.epoch} epochs, final loss {last['total']:.4f}")
    return 0


def _conditions_for(ckpt, cfg, n):
    family = ckpt.meta["family"]
    needs = family in ("fivespring", "shallow_water", "darcy") or (
        TrainConfig.from_dict(ckpt.config).predict_frames > 0
    )
    if not needs:
        return None, None
    if not cfg["conditions_from"]:
        raise ConfigError(f"family {family!r} needs --conditions-from")
    ref_family, ref_samples, _ = box.container_to_dataset(cfg["conditions_from"])
    if len(ref_samples) < n:
        raise ConfigError(f"conditions file holds {len(ref_samples)} < n={n} samples")
    ref_samples = ref_samples[:n]
    if family == "fivespring":
        conds = np.stack([s.edges for s in ref_samples]).astype(np.float64)
    elif family == "shallow_water":
        conds = np.array([s.params["c"] for s in ref_samples])
    elif family == "darcy":
        conds = np.stack([s.params["a"] for s in ref_samples])[:, None, :, :]
    else:  # conditioning frames
        pf = TrainConfig.from_dict(ckpt.config).predict_frames
        conds = np.stack([s.data[:pf].reshape(-1) for s in ref_samples])
    return conds, ref_samples


def _cmd_sample(args):
    defaults = dict(checkpoint=None, n=None, out=None, sampler="dpm1", steps=20,
                    seed=0, conditions_from=None)
    cfg = _resolve(args, defaults)
    _require(cfg, "checkpoint", "n", "out")
    ckpt = box.container_to_checkpoint(cfg["checkpoint"])
    n = cfg["n"]
    conds, ref_samples = _conditions_for(ckpt, cfg, n)
    out = sample_from_checkpoint(
        ckpt, n, sampler=cfg["sampler"], steps=cfg["steps"],
        conditions=conds, seed=cfg["seed"],
    )
    family = ckpt.meta["family"]
    provenance = {
        "checkpoint_sha256": box.file_digest(cfg["checkpoint"]),
        "sampler": cfg["sampler"],
        "steps": cfg["steps"],
        "seed": cfg["seed"],
    }
    _write_samples_container(cfg["out"], family, ckpt, out, conds, ref_samples, provenance)
    _write_resolved(cfg["out"], cfg)
    print(f"wrote {n} {family} samples via {cfg['sampler']}({cfg['steps']})")
    return 0


def _write_samples_container(path, family, ckpt, out, conds, ref_samples, provenance):
    meta = {"provenance": provenance}
    if family in ("threebody", "fivespring"):
        d = out.shape[-1] // 2
        arrays = {
            "coords": out[..., :d],
            "velocities": out[..., d:],
            "masses": np.asarray(ckpt.meta["masses"]),
        }
        if family == "fivespring":
            arrays["edges"] = conds
        meta["dt"] = ckpt.meta.get("dt", 0.1)
        meta["constant"] = ckpt.meta.get("constant", 1.0)
    elif family in ("advection", "burgers"):
        arrays = {"field": out}
        meta["dt"] = ckpt.meta.get("dt")
        meta["dx"] = ckpt.meta.get("dx")
        if family == "advection":
            meta["beta"] = ckpt.meta.get("beta")
        pf = TrainConfig.from_dict(ckpt.config).predict_frames
        if pf and ref_samples is not None:
            full = np.stack([s.data for s in ref_samples])
            arrays["field"] = np.concatenate([full[:, :pf], out], axis=1)
            arrays["generated_tail"] = out
    elif family == "shallow_water":
        n, c3t, hh, ww = out.shape
        t_frames = ckpt.meta["frames"] if "frames" in ckpt.meta else c3t // 3
        arrays = {
            "fields": out.reshape(n, 3, c3t // 3, hh, ww),
            "wave_speed": np.asarray(conds),
        }
        meta["dt"] = ckpt.meta.get("dt")
        meta["dx"] = ckpt.meta.get("dx")
        meta["dy"] = ckpt.meta.get("dy", ckpt.meta.get("dx"))
    elif family == "darcy":
        arrays = {"pressure": out[:, 0], "permeability": conds[:, 0]}
        meta["dx"] = ckpt.meta.get("dx")
        meta["dt"] = ckpt.meta.get("dt", 1.0)
        meta["f_const"] = ckpt.meta.get("f_const", 1.0)
    else:
        raise ConfigError(f"unknown family {family!r}")
    box.write_container(path, family, arrays, meta)


def _cmd_eval(args):
    defaults = dict(samples=None, out=None, reference=None)
    cfg = _resolve(args, defaults)
    _require(cfg, "samples", "out")
    family, samples, meta = box.container_to_dataset(cfg["samples"])
    if family in ("threebody", "fivespring"):
        report = M.particle_metrics(samples, family)
    else:
        report = M.MetricReport()
        report.add("pde_residual_rmse", M.pde_residual_rmse(samples, family), len(samples))
        if cfg["reference"]:
            _, ref, _ = box.container_to_dataset(cfg["reference"])
            ref = ref[: len(samples)]
            if family == "darcy":
                pred = np.stack([s.data for s in samples])
                truth = np.stack([s.data for s in ref])
            else:
                pred = np.stack([s.data for s in samples])
                truth = np.stack([s.data for s in ref])
            report.add("prediction_rmse", M.prediction_rmse(pred, truth), len(samples))
    report.fingerprint = box.file_digest(cfg["samples"])
    with open(cfg["out"], "w") as fh:
        fh.write(report.to_json())
    svgplot.write_csv(str(cfg["out"]) + ".csv", report.csv_rows())
    _write_resolved(cfg["out"], cfg)
    for name, m in sorted(report.metrics.items()):
        print(f"{name}: {m['value']:.6g}")
    return 0


def _cmd_plot(args):
    defaults = dict(input=None, out=None, kind="conserved", index=0, frame=0)
    cfg = _resolve(args, defaults)
    _require(cfg, "input", "out")
    kind = cfg["kind"]
    if kind == "loss":
        ckpt = box.container_to_checkpoint(cfg["input"])
        epochs = [c["epoch"] for c in ckpt.loss_curves]
        series = {
            "total": (epochs, [c["total"] for c in ckpt.loss_curves]),
            "match": (epochs, [c["match"] for c in ckpt.loss_curves]),
            "penalty": (epochs, [c["penalty"] for c in ckpt.loss_curves]),
        }
        svgplot.line_chart(cfg["out"], series, title="training loss",
                           xlabel="epoch", ylabel="loss")
        return 0
    family, samples, _ = box.container_to_dataset(cfg["input"])
    idx = cfg["index"]
    if idx >= len(samples):
        raise ConfigError(f"index {idx} out of range ({len(samples)} samples)")
    s = samples[idx]
    if kind == "conserved":
        if family not in ("threebody", "fivespring"):
            raise ConfigError("conserved plots need a particle family")
        if family == "threebody":
            energy = C.threebody_energy(s.c, s.v, s.masses, s.constant)
        else:
            energy = C.fivespring_energy(s.c, s.v, s.masses, s.constant, s.edges)
        p = C.total_momentum(s.v, s.masses)
        frames = np.arange(s.frames)
        series = {"energy": (frames, energy),
                  "momentum_norm": (frames, np.linalg.norm(p, axis=-1))}
        svgplot.line_chart(cfg["out"], series, title=f"{family} conserved quantities",
                           xlabel="frame", ylabel="value")
    elif kind == "trajectory":
        if family not in ("threebody", "fivespring"):
            raise ConfigError("trajectory plots need a particle family")
        svgplot.trajectory_plot(cfg["out"], s.c, title=f"{family} sample {idx}")
    elif kind == "field":
        if family in ("threebody", "fivespring"):
            raise ConfigError("field plots need a field family")
        if family == "shallow_water":
            grid = s.data[0, cfg["frame"]]
        elif s.data.ndim == 2:
            grid = s.data
        else:
            grid = s.data[cfg["frame"]]
        svgplot.heatmap(cfg["out"], grid, title=f"{family} sample {idx}")
    else:
        raise ConfigError(f"unknown plot kind {kind!r}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "plot": _cmd_plot,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
