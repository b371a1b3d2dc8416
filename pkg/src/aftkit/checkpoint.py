"""Binary checkpoint persistence for ModelState.

Layout (little-endian): magic "AFCK", u32 version=1, f64 tau,
u32 param_count, then per parameter: u16 name_len, UTF-8 name, u8 ndim,
u32 dims[ndim], f64 data. Parameters are written in sorted-name order so
re-serialization is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .encoders import EncoderConfig, ModelState
from .errors import FormatError
from .tensor import Tensor

MAGIC = b"AFCK"
VERSION = 1


def save_checkpoint(state, path):
    params = {}
    params.update({name: t.data for name, t in state.theta.items()})
    params.update({name: t.data for name, t in state.phi.items()})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Id", VERSION, state.tau))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Rebuild a ModelState; encoder configs are inferred from layer shapes."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError("checkpoint: bad magic bytes")
        version, tau = struct.unpack("<Id", _read_exact(f, 12, "header"))
        if version != VERSION:
            raise FormatError(f"checkpoint: unsupported version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "param count"))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
            n = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 8 * n, f"data of {name}"), dtype="<f8")
            params[name] = data.reshape(dims).astype(np.float64)
    theta = {k: Tensor(v, requires_grad=True) for k, v in params.items()
             if k.startswith("vision.")}
    phi = {k: Tensor(v, requires_grad=True) for k, v in params.items()
           if k.startswith("text.")}
    if not theta or "text.embed" not in phi:
        raise FormatError("checkpoint: missing vision or text parameters")
    vision_cfg = _infer_cfg(theta, "vision")
    text_cfg = _infer_cfg(phi, "text")
    return ModelState(theta=theta, phi=phi, tau=tau,
                      vision_cfg=vision_cfg, text_cfg=text_cfg)


def _infer_cfg(params, prefix):
    n_layers = sum(1 for k in params if k.startswith(f"{prefix}.layer") and k.endswith(".w"))
    dims = [params[f"{prefix}.layer0.w"].data.shape[0]]
    for i in range(n_layers):
        dims.append(params[f"{prefix}.layer{i}.w"].data.shape[1])
    return EncoderConfig(input_dim=dims[0], hidden_dims=dims[1:-1], embed_dim=dims[-1])
