"""Versioned binary checkpoints: model, prototype store and per-task EFMs.

Layout (little-endian)::

    b"EFC1" u32 version
    u32 len, utf-8 config JSON
    u32 finished tasks
    backbone: u32 layers, then per layer u32 in, u32 out, u8 activation,
              f64[in*out] weight (row-major), f64[out] bias
    head:     u32 n, u32 m, f64[n*m], u32 ranges, (u32 start, u32 stop)*
    efms:     u32 count, then per EFM i32 task, u64 samples, u32 n, f64[n*n]
    store:    see ``write_store``
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .backbone import IDENTITY, RELU, BackboneParams, ClassifierHead, IncrementalModel, Layer
from .efm import EmpiricalFeatureMatrix
from .prototypes import CovariancePolicy, LowRankCovariance, Prototype, PrototypeStore

MAGIC = b"EFC1"
VERSION = 1
_ACTIVATIONS = {IDENTITY: 0, RELU: 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATIONS.items()}


class CheckpointError(ValueError):
    pass


def _u32(buf, v):
    buf.write(struct.pack("<I", v))


def _arr(buf, a):
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _text(buf, s: str):
    raw = s.encode("utf-8")
    _u32(buf, len(raw))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def arr(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def write_store(buf, store: PrototypeStore) -> None:
    """policy text; u32 classes, per class i64 id, u32 task, u32 n, f64[n] mean,
    u8 kind (0 none, 1 full, 2 low-rank) + payload; u32 task covs, per
    cov u32 task, u32 n, f64[n*n]."""
    _text(buf, str(store.policy))
    _u32(buf, len(store.prototypes))
    for c, p in store.prototypes.items():
        n = p.mean.shape[0]
        buf.write(struct.pack("<qII", c, p.task, n))
        _arr(buf, p.mean)
        if p.cov is not None:
            buf.write(b"\x01")
            _arr(buf, p.cov)
        elif p.lowrank is not None:
            buf.write(b"\x02")
            _u32(buf, p.lowrank.rank)
            _arr(buf, p.lowrank.vectors)
            _arr(buf, p.lowrank.values)
        else:
            buf.write(b"\x00")
    _u32(buf, len(store.task_covs))
    for task, cov in store.task_covs.items():
        buf.write(struct.pack("<II", task, cov.shape[0]))
        _arr(buf, cov)


def read_store(r: _Reader) -> PrototypeStore:
    store = PrototypeStore(CovariancePolicy.parse(r.text()))
    for _ in range(r.u32()):
        c, task, n = r.unpack("<qII")
        proto = Prototype(c, task, r.arr(n))
        kind = r.take(1)
        if kind == b"\x01":
            proto.cov = r.arr(n, n)
        elif kind == b"\x02":
            rank = r.u32()
            proto.lowrank = LowRankCovariance(r.arr(n, rank), r.arr(rank))
        store.prototypes[c] = proto
    for _ in range(r.u32()):
        task, n = r.unpack("<II")
        store.task_covs[task] = r.arr(n, n)
    return store


def store_to_bytes(store: PrototypeStore) -> bytes:
    buf = io.BytesIO()
    write_store(buf, store)
    return buf.getvalue()


def store_from_bytes(data: bytes) -> PrototypeStore:
    return read_store(_Reader(data))


def checkpoint_bytes(model: IncrementalModel, store: PrototypeStore, efms, config_json: str = "{}", task: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    _text(buf, config_json)
    _u32(buf, task)
    _u32(buf, len(model.backbone.layers))
    for layer in model.backbone.layers:
        fan_in, fan_out = layer.weight.shape
        buf.write(struct.pack("<IIB", fan_in, fan_out, _ACTIVATIONS[layer.activation]))
        _arr(buf, layer.weight)
        _arr(buf, layer.bias)
    n, m = model.head.weight.shape
    buf.write(struct.pack("<II", n, m))
    _arr(buf, model.head.weight)
    _u32(buf, len(model.head.task_ranges))
    for start, stop in model.head.task_ranges:
        buf.write(struct.pack("<II", start, stop))
    _u32(buf, len(efms))
    for e in efms:
        buf.write(struct.pack("<iQI", e.task, e.sample_count, e.matrix.shape[0]))
        _arr(buf, e.matrix)
    write_store(buf, store)
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> dict:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an EFC checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_json = r.text()
    task = r.u32()
    layers = []
    for _ in range(r.u32()):
        fan_in, fan_out, act = r.unpack("<IIB")
        layers.append(Layer(r.arr(fan_in, fan_out), r.arr(fan_out), _ACTIVATION_NAMES[act]))
    n, m = r.unpack("<II")
    weight = r.arr(n, m)
    ranges = [tuple(r.unpack("<II")) for _ in range(r.u32())]
    model = IncrementalModel(BackboneParams(layers), ClassifierHead(weight, ranges))
    efms = []
    for _ in range(r.u32()):
        t, count, size = r.unpack("<iQI")
        efms.append(EmpiricalFeatureMatrix(r.arr(size, size), t, count))
    store = read_store(r)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return {"model": model, "store": store, "efms": efms, "config_json": config_json, "task": task}


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model, store, efms, config_json: str = "{}", task: int = 0) -> None:
    atomic_write(path, checkpoint_bytes(model, store, efms, config_json, task))


def load_checkpoint(path) -> dict:
    return parse_checkpoint(Path(path).read_bytes())
