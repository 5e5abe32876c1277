"""Binary checkpoints: config snapshot, parameters, optimizer moments,
step-sampler history and RNG stream states, restoring training bit-exactly.

Layout (all little-endian): magic "DFKP", u16 version, length-prefixed
canonical config JSON, u32 epoch, named float32 parameter tensors, the Adam
step counter and float32 moment arrays in parameter order, the sampler's
ring buffers, and tagged opaque RNG states.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .engine import parameter
from .model import DsrParams
from .optim import AdamState
from .rng import RngStreams
from .training import ImportanceSampler

_MAGIC = b"DFKP"
_VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    params: DsrParams
    opt: AdamState
    sampler: ImportanceSampler
    rng_snapshot: dict
    epoch: int

    def restore_streams(self) -> RngStreams:
        streams = RngStreams(self.config.master_seed)
        streams.set_state(self.rng_snapshot)
        return streams


def _write_bytes(buf, raw: bytes, width: str) -> None:
    buf.write(struct.pack(width, len(raw)))
    buf.write(raw)


def _write_f32(buf, arr: np.ndarray) -> None:
    if arr.dtype != np.float32:
        raise ValueError("checkpoints store float32 tensors; train in float32")
    buf.write(arr.astype("<f4", copy=False).tobytes())


def save_checkpoint(path, config: RunConfig, params: DsrParams, opt: AdamState,
                    sampler: ImportanceSampler, streams: RngStreams, epoch: int) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    _write_bytes(buf, config_mod.canonical_json(config).encode("utf-8"), "<I")
    buf.write(struct.pack("<I", epoch))

    names = params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        data = params[name].data
        _write_bytes(buf, name.encode("utf-8"), "<H")
        buf.write(struct.pack("<B", data.ndim))
        for extent in data.shape:
            buf.write(struct.pack("<I", extent))
        _write_f32(buf, data)

    buf.write(struct.pack("<Q", opt.t))
    for name in names:
        _write_f32(buf, opt.m[name])
    for name in names:
        _write_f32(buf, opt.v[name])

    buf.write(struct.pack("<II", sampler.steps, sampler.history))
    buf.write(sampler.counts.astype("<i8").tobytes())
    buf.write(sampler.write_pos.astype("<i8").tobytes())
    buf.write(sampler.values.astype("<f8").tobytes())

    snapshot = streams.state()
    buf.write(struct.pack("<I", len(snapshot)))
    for name, entry in snapshot.items():
        _write_bytes(buf, name.encode("utf-8"), "<H")
        _write_bytes(buf, entry["alg"].encode("utf-8"), "<H")
        _write_bytes(buf, entry["state"].encode("utf-8"), "<I")

    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_bytes(view, pos: int, width: str):
    (length,) = struct.unpack_from(width, view, pos)
    pos += struct.calcsize(width)
    return bytes(view[pos:pos + length]), pos + length


def _read_f32(view, pos: int, shape):
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
    return np.array(arr, dtype=np.float32), pos + 4 * count


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    cfg_raw, pos = _read_bytes(view, pos, "<I")
    cfg = config_mod.from_dict(json.loads(cfg_raw.decode("utf-8")))
    (epoch,) = struct.unpack_from("<I", view, pos)
    pos += 4

    (n_params,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    shapes = {}
    for _ in range(n_params):
        name_raw, pos = _read_bytes(view, pos, "<H")
        name = name_raw.decode("utf-8")
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = []
        for _ in range(ndim):
            (extent,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape.append(extent)
        data, pos = _read_f32(view, pos, tuple(shape))
        tensors[name] = parameter(data, name)
        shapes[name] = tuple(shape)

    vocab_size = tensors["item_embedding"].data.shape[0]
    params = DsrParams(tensors, cfg.model, vocab_size)

    (adam_t,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    opt = AdamState(lr=cfg.train.lr, b1=cfg.train.adam_beta1,
                    b2=cfg.train.adam_beta2, eps=cfg.train.adam_eps, t=int(adam_t))
    for name in tensors:
        opt.m[name], pos = _read_f32(view, pos, shapes[name])
    for name in tensors:
        opt.v[name], pos = _read_f32(view, pos, shapes[name])

    steps, history = struct.unpack_from("<II", view, pos)
    pos += 8
    sampler = ImportanceSampler(steps, history)
    sampler.counts[:] = np.frombuffer(view, dtype="<i8", count=steps, offset=pos)
    pos += 8 * steps
    sampler.write_pos[:] = np.frombuffer(view, dtype="<i8", count=steps, offset=pos)
    pos += 8 * steps
    sampler.values[:] = np.frombuffer(
        view, dtype="<f8", count=steps * history, offset=pos
    ).reshape(steps, history)
    pos += 8 * steps * history

    (n_streams,) = struct.unpack_from("<I", view, pos)
    pos += 4
    snapshot = {}
    for _ in range(n_streams):
        name_raw, pos = _read_bytes(view, pos, "<H")
        alg_raw, pos = _read_bytes(view, pos, "<H")
        state_raw, pos = _read_bytes(view, pos, "<I")
        snapshot[name_raw.decode("utf-8")] = {
            "alg": alg_raw.decode("utf-8"),
            "state": state_raw.decode("utf-8"),
        }
    return Checkpoint(config=cfg, params=params, opt=opt, sampler=sampler,
                      rng_snapshot=snapshot, epoch=int(epoch))
