"""Binary checkpoint I/O.

Layout (little-endian): magic ``CXRS``, u32 version (1), u32 tensor count,
then per tensor: u16 name length, UTF-8 name, u8 dtype tag (0 = f32,
1 = f64), u8 rank, u32 per dim, row-major payload.

Names starting with ``__`` hold metadata (currently ``__input_dims__``) and
are not model parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, FormatError
from .model import NetworkGraph, NetworkSpec, build_network

MAGIC = b"CXRS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        tag = _TAGS[arr.dtype]
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            tag, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            if tag not in _DTYPES:
                raise FormatError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise FormatError(f"{path}: truncated payload for tensor {name!r}")
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off)
            out[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def save_checkpoint(graph: NetworkGraph, path) -> None:
    tensors = {"__input_dims__": np.asarray(graph.input_dims, dtype=np.float64)}
    for name in graph.param_names():
        tensors[name] = graph.params[name]
    write_tensors(path, tensors)


def _match(graph: NetworkGraph, loaded: dict[str, np.ndarray], names) -> None:
    for name in names:
        layer = name.rsplit(".", 1)[0]
        if name not in loaded:
            raise CompatibilityError(f"layer {layer}: tensor {name!r} missing from checkpoint")
        want = graph.params[name].shape
        got = loaded[name].shape
        if want != got:
            raise CompatibilityError(
                f"layer {layer}: tensor {name!r} has dims {list(got)}, spec expects {list(want)}")


def load_checkpoint(path, spec: NetworkSpec, input_dims=None) -> NetworkGraph:
    loaded = read_tensors(path)
    if input_dims is None:
        meta = loaded.get("__input_dims__")
        if meta is None:
            raise FormatError(f"{path}: no input dims stored; pass input_dims explicitly")
        input_dims = tuple(int(d) for d in meta)
    graph = build_network(spec, input_dims)
    names = graph.param_names()
    _match(graph, loaded, names)
    graph.params = {name: loaded[name] for name in names}
    return graph


def load_backbone_weights(graph: NetworkGraph, path) -> NetworkGraph:
    """Copy backbone tensors from a checkpoint into ``graph`` (transfer-learning hook).

    Head tensors in the file are ignored, so a backbone trained with a
    different head can seed a new severity head.
    """
    loaded = read_tensors(path)
    names = graph.param_names("backbone")
    _match(graph, loaded, names)
    params = dict(graph.params)
    params.update({name: loaded[name].astype(graph.params[name].dtype) for name in names})
    out = NetworkGraph(graph.spec, graph.input_dims, graph.layers, params, set(graph.frozen))
    return out
