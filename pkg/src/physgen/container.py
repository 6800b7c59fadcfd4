"""Self-describing binary container for datasets, samples, and checkpoints.

Layout (little-endian):

    magic    4 bytes  b"PHGD"
    version  u16      currently 1
    hlen     u32      byte length of the JSON header
    header   hlen bytes of canonical UTF-8 JSON:
             {"family": str,
              "arrays": [{"name": str, "shape": [int, ...]}, ...],
              "meta": {...}}
    payload  for each entry of header["arrays"], in order: the raw C-order
             float64 bytes of that array

The header JSON is serialized with sorted keys and no whitespace, so a
write -> read -> write cycle is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from physgen.data import FieldSample, TrajectorySample
from physgen.train import Checkpoint

__all__ = [
    "write_container",
    "read_container",
    "dataset_to_container",
    "container_to_dataset",
    "checkpoint_to_container",
    "container_to_checkpoint",
    "file_digest",
]

MAGIC = b"PHGD"
VERSION = 1


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, family, arrays, meta=None):
    """arrays: ordered mapping name -> ndarray (stored as float64)."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = _canonical({"family": family, "arrays": entries, "meta": meta or {}})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path):
    """Returns (family, arrays dict in stored order, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"contract violation: bad magic in {path}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise ValueError(f"contract violation: unsupported container version {version}")
    (hlen,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    offset = 10 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise ValueError(f"contract violation: truncated payload in {path}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"contract violation: trailing bytes in {path}")
    return header["family"], arrays, header["meta"]


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def dataset_to_container(path, family, samples, meta=None):
    """Stack a homogeneous sample list and write it."""
    meta = dict(meta or {})
    if family in ("threebody", "fivespring"):
        arrays = {
            "coords": np.stack([s.c for s in samples]),
            "velocities": np.stack([s.v for s in samples]),
            "masses": samples[0].masses,
        }
        if family == "fivespring":
            arrays["edges"] = np.stack([s.edges for s in samples]).astype(np.float64)
        meta.setdefault("dt", samples[0].dt)
        meta.setdefault("constant", samples[0].constant)
    elif family in ("advection", "burgers"):
        arrays = {"field": np.stack([s.data for s in samples])}
        meta.setdefault("dt", samples[0].dt)
        meta.setdefault("dx", samples[0].dx)
        if family == "advection":
            meta.setdefault("beta", samples[0].params["beta"])
    elif family == "shallow_water":
        arrays = {
            "fields": np.stack([s.data for s in samples]),
            "wave_speed": np.array([s.params["c"] for s in samples]),
        }
        meta.setdefault("dt", samples[0].dt)
        meta.setdefault("dx", samples[0].dx)
        meta.setdefault("dy", samples[0].dy)
    elif family == "darcy":
        arrays = {
            "pressure": np.stack(
                [s.data if s.data.ndim == 2 else s.data[-1] for s in samples]
            ),
            "permeability": np.stack([s.params["a"] for s in samples]),
        }
        meta.setdefault("dx", samples[0].dx)
        meta.setdefault("dt", samples[0].dt)
        meta.setdefault("f_const", samples[0].params.get("f_const", 1.0))
    else:
        raise ValueError(f"contract violation: unknown family {family!r}")
    write_container(path, family, arrays, meta)


def container_to_dataset(path):
    """Returns (family, list of samples, meta)."""
    family, arrays, meta = read_container(path)
    if family in ("threebody", "fivespring"):
        cs, vs = arrays["coords"], arrays["velocities"]
        masses = arrays["masses"]
        samples = []
        for i in range(cs.shape[0]):
            edges = None
            if family == "fivespring":
                edges = arrays["edges"][i] > 0.5
            samples.append(
                TrajectorySample(
                    c=cs[i], v=vs[i], masses=masses,
                    constant=meta.get("constant", 1.0),
                    edges=edges, dt=meta.get("dt", 0.1),
                )
            )
        return family, samples, meta
    if family in ("advection", "burgers"):
        params = {"beta": meta["beta"]} if family == "advection" else {}
        samples = [
            FieldSample(u, dt=meta["dt"], dx=meta["dx"], params=dict(params))
            for u in arrays["field"]
        ]
        return family, samples, meta
    if family == "shallow_water":
        samples = [
            FieldSample(
                f, dt=meta["dt"], dx=meta["dx"], dy=meta["dy"],
                params={"c": float(c)},
            )
            for f, c in zip(arrays["fields"], arrays["wave_speed"])
        ]
        return family, samples, meta
    if family == "darcy":
        samples = [
            FieldSample(
                u, dt=meta.get("dt", 1.0), dx=meta["dx"], dy=meta["dx"],
                params={"a": a, "f_const": meta.get("f_const", 1.0)},
            )
            for u, a in zip(arrays["pressure"], arrays["permeability"])
        ]
        return family, samples, meta
    raise ValueError(f"contract violation: unknown family {family!r}")


def checkpoint_to_container(path, ckpt: Checkpoint):
    arrays = dict(ckpt.params)
    meta = {
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "data_scale": ckpt.data_scale,
        "model_meta": ckpt.meta,
        "loss_curves": ckpt.loss_curves,
    }
    write_container(path, "checkpoint", arrays, meta)


def container_to_checkpoint(path) -> Checkpoint:
    family, arrays, meta = read_container(path)
    if family != "checkpoint":
        raise ValueError(f"contract violation: {path} is not a checkpoint container")
    return Checkpoint(
        params=arrays,
        config=meta["config"],
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        data_scale=meta["data_scale"],
        meta=meta["model_meta"],
        loss_curves=meta["loss_curves"],
    )
