"""Byte-exact binary checkpoints.

Layout (all integers little-endian uint32, floats little-endian float64):

    magic   8 bytes  b"AGNTCKPT"
    version u32
    count   u32                      -- trainable parameters
    record*: name_len u32, name utf-8, rank u32, dims u32*rank, data f64*
    count   u32                      -- state arrays (optimizer moments,
    record*                             noise statistics, counters)

Entries are written in store insertion order, so save -> load -> save is an
identity on bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .store import ParameterStore

MAGIC = b"AGNTCKPT"
VERSION = 1


def _write_record(fh, name, arr):
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_record(fh):
    (name_len,) = struct.unpack("<I", fh.read(4))
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(dims)
    return name, data.astype(np.float64)


def save(store, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(store.params)))
        for name, p in store.params.items():
            _write_record(fh, name, p.data)
        fh.write(struct.pack("<I", len(store.state)))
        for name, arr in store.state.items():
            _write_record(fh, name, arr)


def load(path):
    store = ParameterStore()
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n_params,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_params):
            name, data = _read_record(fh)
            store.param(name, data)
        (n_state,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_state):
            name, data = _read_record(fh)
            store.state[name] = data
    return store


def load_into(store, path):
    """Overwrite an existing store's values in place (shape-checked).

    State arrays are updated in place when they already exist, so references
    held by optimizers and trainers (moments, step counters) stay live.
    """
    loaded = load(path)
    if list(loaded.params) != list(store.params):
        raise ValueError("checkpoint parameter names do not match the model")
    for name, p in loaded.params.items():
        if p.data.shape != store[name].data.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        store[name].data[...] = p.data
        store[name].grad = None
    for name, arr in loaded.state.items():
        if name in store.state and store.state[name].shape == arr.shape:
            store.state[name][...] = arr
        else:
            store.state[name] = arr
    return store
