"""Binary checkpoints: a JSON header plus little-endian float64 parameter payloads.

Layout::

    MAGIC (8 bytes) | header length (uint64 LE) | header (UTF-8 JSON) | payload

The header's manifest lists every array as (group, name, shape, offset) with
offsets relative to the payload start. Groups: ``theta`` (student), ``phi``
(fake model), ``opt.m``/``opt.v`` and ``fake_opt.m``/``fake_opt.v`` (moments),
``ema`` (shadow) and optionally ``teacher``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import DualModeModel, ModelConfig
from .optim import EmaState, OptimState
from .trainer import TrainState

MAGIC = b"DFCKPT01"
VERSION = 1
_HYPER = ("lr", "beta1", "beta2", "weight_decay", "clip_norm", "eps", "step")


class CheckpointError(OSError):
    pass


@dataclass
class Checkpoint:
    step: int
    seed: int
    config_hash: str
    model_config: dict
    groups: dict  # group -> {name: array}
    meta: dict = field(default_factory=dict)


def _rng_state(seed: int, step: int) -> dict:
    st = np.random.default_rng([seed, step, 0]).bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": {k: str(v) for k, v in st["state"].items()}}


def save(path: str | Path, ck: Checkpoint) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    manifest, blobs, off = [], [], 0
    for g in sorted(ck.groups):
        for name in sorted(ck.groups[g]):
            arr = np.ascontiguousarray(ck.groups[g][name], dtype="<f8")
            manifest.append({"group": g, "name": name, "shape": list(arr.shape), "offset": off})
            b = arr.tobytes()
            blobs.append(b)
            off += len(b)
    header = {
        "version": VERSION, "step": ck.step, "seed": ck.seed, "rng": _rng_state(ck.seed, ck.step),
        "config_hash": ck.config_hash, "model_config": ck.model_config, "meta": ck.meta,
        "manifest": manifest, "payload_bytes": off,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(hb)))
            f.write(hb)
            for b in blobs:
                f.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = memoryview(data)[16 + n:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload")
    groups: dict = {}
    for e in header["manifest"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).astype(np.float64)
        groups.setdefault(e["group"], {})[e["name"]] = arr.reshape(e["shape"])
    return Checkpoint(header["step"], header["seed"], header["config_hash"], header["model_config"],
                      groups, header.get("meta", {}))


def _hyper(opt: OptimState) -> dict:
    return {k: getattr(opt, k) for k in _HYPER}


def from_state(state: TrainState, seed: int, config_hash: str, meta: dict | None = None) -> Checkpoint:
    g = {"theta": state.model.params, "opt.m": state.opt.m, "opt.v": state.opt.v, "ema": state.ema.shadow}
    meta = dict(meta or {})
    meta.update({"opt": _hyper(state.opt), "ema_decay": state.ema.decay, "skipped": state.skipped,
                 "coupled": state.model.cfg.coupled})
    if state.fake is not None:
        g.update({"phi": state.fake.params, "fake_opt.m": state.fake_opt.m, "fake_opt.v": state.fake_opt.v})
        meta["fake_opt"] = _hyper(state.fake_opt)
    if state.teacher is not None:
        g["teacher"] = state.teacher.params
    return Checkpoint(state.step, seed, config_hash, asdict(state.model.cfg), g, meta)


def model_of(ck: Checkpoint, group: str = "theta") -> DualModeModel:
    if group not in ck.groups:
        raise CheckpointError(f"checkpoint has no '{group}' parameters")
    return DualModeModel(ModelConfig(**ck.model_config), {k: v.copy() for k, v in ck.groups[group].items()})


def to_state(ck: Checkpoint) -> TrainState:
    model = model_of(ck)
    m = ck.meta
    opt = OptimState(**m["opt"])
    opt.m, opt.v = dict(ck.groups["opt.m"]), dict(ck.groups["opt.v"])
    st = TrainState(model=model, opt=opt, ema=EmaState(dict(ck.groups["ema"]), m["ema_decay"]),
                    step=ck.step, skipped=m.get("skipped", 0))
    if "phi" in ck.groups:
        st.fake = model_of(ck, "phi")
        st.fake_opt = OptimState(**m["fake_opt"])
        st.fake_opt.m, st.fake_opt.v = dict(ck.groups["fake_opt.m"]), dict(ck.groups["fake_opt.v"])
    if "teacher" in ck.groups:
        st.teacher = model_of(ck, "teacher")
    return st
