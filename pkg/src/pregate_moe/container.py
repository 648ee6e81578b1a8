"""Binary weight container.

Layout (all integers little-endian)::

    magic    4 bytes  b"PGMW"
    version  u16      1
    meta     u32 length + UTF-8 text
    count    u32      number of arrays
    per array:
        name   u16 length + UTF-8
        dtype  1 byte   b"f" float64 | b"i" int64
        ndim   u8
        dims   u32 * ndim
        data   row-major, 8 bytes per element
"""

from __future__ import annotations

import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .ffn import DenseFFN, ExpertMask, ExpertWeights

MAGIC = b"PGMW"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps_arrays(arrays: dict[str, np.ndarray], meta: str = "") -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION)]
    m = meta.encode("utf-8")
    out.append(struct.pack("<I", len(m)) + m)
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            code, data = b"i", arr.astype("<i8")
        else:
            code, data = b"f", arr.astype("<f8")
        n = name.encode("utf-8")
        out.append(struct.pack("<H", len(n)) + n + code + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(data).tobytes())
    return b"".join(out)


def loads_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container at byte {pos}")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ContainerError("bad magic bytes")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = take(mlen).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code = take(1)
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        if code == b"f":
            dtype = "<f8"
        elif code == b"i":
            dtype = "<i8"
        else:
            raise ContainerError(f"unknown dtype code {code!r} for {name}")
        arrays[name] = np.frombuffer(take(8 * size), dtype=dtype).reshape(dims).copy()
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes")
    return arrays, meta


def save_arrays(path, arrays, meta: str = "") -> None:
    Path(path).write_bytes(dumps_arrays(arrays, meta))


def load_arrays(path) -> tuple[dict[str, np.ndarray], str]:
    return loads_arrays(Path(path).read_bytes())


_ACTS = ("relu", "silu")


def dense_to_arrays(model: DenseFFN) -> dict[str, np.ndarray]:
    arrays = {"activation": np.array([_ACTS.index(model.activation)])}
    for l in range(model.num_layers):
        arrays[f"w1.{l}"] = model.w1[l]
        arrays[f"w2.{l}"] = model.w2[l]
    return arrays


def dense_from_arrays(arrays) -> DenseFFN:
    n = sum(1 for k in arrays if k.startswith("w1."))
    return DenseFFN(tuple(arrays[f"w1.{l}"] for l in range(n)),
                    tuple(arrays[f"w2.{l}"] for l in range(n)),
                    _ACTS[int(arrays["activation"][0])])


def experts_to_arrays(experts) -> dict[str, np.ndarray]:
    arrays = {"activation": np.array([_ACTS.index(experts[0].activation)]),
              "num_experts": np.array([len(experts)])}
    for i, ex in enumerate(experts):
        for l in range(ex.num_layers):
            arrays[f"e{i}.w1.{l}"] = ex.w1[l]
            arrays[f"e{i}.w2.{l}"] = ex.w2[l]
            arrays[f"e{i}.channels.{l}"] = np.array(ex.channels[l], dtype=np.int64)
            if ex.masks:
                m = ex.masks[l]
                arrays[f"e{i}.mask.{l}"] = np.array([m.width, *m.selected], dtype=np.int64)
    return arrays


def experts_from_arrays(arrays) -> list[ExpertWeights]:
    act = _ACTS[int(arrays["activation"][0])]
    out = []
    for i in range(int(arrays["num_experts"][0])):
        n = sum(1 for k in arrays if k.startswith(f"e{i}.w1."))
        masks = []
        for l in range(n):
            raw = arrays.get(f"e{i}.mask.{l}")
            if raw is not None:
                masks.append(ExpertMask(l, int(raw[0]), tuple(int(c) for c in raw[1:])))
        out.append(ExpertWeights(
            tuple(arrays[f"e{i}.w1.{l}"] for l in range(n)),
            tuple(arrays[f"e{i}.w2.{l}"] for l in range(n)),
            tuple(tuple(int(c) for c in arrays[f"e{i}.channels.{l}"]) for l in range(n)),
            act, tuple(masks)))
    return out


def router_to_arrays(router) -> dict[str, np.ndarray]:
    cfg = asdict(router.config)
    arrays = {"config.ints": np.array([cfg[k] for k in _ROUTER_INTS], dtype=np.int64),
              "config.floats": np.array([cfg["rope_base"], cfg["eps"]])}
    for k, v in router.params.items():
        arrays[f"p.{k}"] = v
    return arrays


_ROUTER_INTS = ("vocab_size", "embed_dim", "feature_dim", "num_heads", "mlp_dim",
                "num_experts", "top_k")


def router_from_arrays(arrays):
    from .moe_model import PreGateRouter, RouterConfig

    ints = dict(zip(_ROUTER_INTS, (int(v) for v in arrays["config.ints"])))
    rope_base, eps = (float(v) for v in arrays["config.floats"])
    cfg = RouterConfig(**ints, rope_base=rope_base, eps=eps)
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p.")}
    return PreGateRouter(cfg, params)
