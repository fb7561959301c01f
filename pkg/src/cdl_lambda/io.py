"""Binary file formats.

All integers and floats are little-endian.

``CDLD`` dictionary::

    b"CDLD" | u32 version=1 | u32 K | u32 k_f | K*k_f*k_f f64 | u32 n | n bytes UTF-8 JSON

``CIMG`` complex image (also used for k-space)::

    b"CIMG" | u32 h | u32 w | h*w f64 real plane | h*w f64 imaginary plane

``CDLN`` estimator checkpoint::

    b"CDLN" | u32 version=1 | u8 variant | u32 n | n bytes UTF-8 JSON architecture | f64 parameters

The parameter blob holds the U-Net tensors in the order listed under
``"params"`` in the architecture JSON, then the scalar ``t``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .linops import Dictionary

__all__ = [
    "FormatError",
    "write_dictionary",
    "read_dictionary",
    "dictionary_to_bytes",
    "dictionary_from_bytes",
    "write_cimg",
    "read_cimg",
    "write_pgm",
    "write_checkpoint",
    "read_checkpoint",
]

DICT_MAGIC = b"CDLD"
CIMG_MAGIC = b"CIMG"
CKPT_MAGIC = b"CDLN"
VERSION = 1
_VARIANT_CODES = {"v1": 1, "v2": 2, "v3": 3}


class FormatError(ValueError):
    """File contents do not match the expected format."""


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- dictionaries ----------------------------------------------------------------


def dictionary_to_bytes(D: Dictionary) -> bytes:
    meta = _json_bytes(D.meta)
    return (
        DICT_MAGIC
        + struct.pack("<III", VERSION, D.K, D.k_f)
        + _f64(D.filters)
        + struct.pack("<I", len(meta))
        + meta
    )


def dictionary_from_bytes(buf: bytes) -> Dictionary:
    r = _Reader(buf)
    if r.take(4) != DICT_MAGIC:
        raise FormatError("not a CDLD dictionary file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported dictionary version {version}")
    K, k = r.u32(), r.u32()
    filters = r.f64(K * k * k).reshape(K, k, k)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    r.done()
    return Dictionary(filters, meta)


def write_dictionary(path, D: Dictionary) -> None:
    _write_atomic(path, dictionary_to_bytes(D))


def read_dictionary(path) -> Dictionary:
    return dictionary_from_bytes(Path(path).read_bytes())


# -- images ------------------------------------------------------------------------


def write_cimg(path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"CIMG holds 2D arrays, got shape {x.shape}")
    h, w = x.shape
    _write_atomic(path, CIMG_MAGIC + struct.pack("<II", h, w) + _f64(x.real) + _f64(np.imag(x)))


def read_cimg(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CIMG_MAGIC:
        raise FormatError("not a CIMG file")
    h, w = r.u32(), r.u32()
    re = r.f64(h * w).reshape(h, w)
    im = r.f64(h * w).reshape(h, w)
    r.done()
    out = np.empty((h, w), dtype=np.complex128)
    out.real = re
    out.imag = im
    return out


def write_pgm(path, x: np.ndarray, vmax: float | None = None) -> None:
    """8-bit binary PGM of the magnitude, scaled to ``[0, vmax]``."""
    mag = np.abs(np.asarray(x))
    top = float(mag.max()) if vmax is None else float(vmax)
    scaled = np.zeros_like(mag) if top == 0 else np.clip(mag / top, 0, 1) * 255
    h, w = mag.shape
    _write_atomic(path, f"P5\n{w} {h}\n255\n".encode("ascii") + np.round(scaled).astype(np.uint8).tobytes())


# -- estimator checkpoints -----------------------------------------------------------


def write_checkpoint(path, est, extra: dict | None = None) -> None:
    """``extra`` (JSON-serialisable) rides along in the descriptor, e.g. the solver settings used in training."""
    arch = est.unet.architecture()
    arch["variant"] = est.variant
    arch["K"] = est.K
    arch["params"] = [[name, list(p.shape)] for name, p in est.unet.params.items()]
    if extra:
        arch["extra"] = extra
    blob = b"".join(_f64(p.data) for p in est.unet.params.values()) + _f64(est.t.data)
    desc = _json_bytes(arch)
    data = (
        CKPT_MAGIC
        + struct.pack("<IB", VERSION, _VARIANT_CODES[est.variant])
        + struct.pack("<I", len(desc))
        + desc
        + blob
    )
    _write_atomic(path, data)


def read_checkpoint(path, with_extra: bool = False):
    from . import autodiff as ad
    from .lambda_net import LambdaEstimator, UNet

    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a CDLN checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    code = r.u8()
    arch = json.loads(r.take(r.u32()).decode("utf-8"))
    variant = arch["variant"]
    if _VARIANT_CODES.get(variant) != code:
        raise FormatError("variant byte disagrees with the architecture descriptor")
    unet = UNet(arch["in_channels"], arch["out_channels"], tuple(arch["widths"]), arch["slope"], seed=0)
    names = [name for name, _ in arch["params"]]
    if names != list(unet.params):
        raise FormatError("parameter layout does not match the architecture")
    for name, shape in arch["params"]:
        n = int(np.prod(shape)) if shape else 1
        unet.params[name] = ad.Tensor(r.f64(n).reshape(shape), requires_grad=True)
    t = ad.Tensor(r.f64(1).reshape(()), requires_grad=True)
    r.done()
    est = LambdaEstimator(variant, unet, t=t, K=arch["K"])
    return (est, arch.get("extra", {})) if with_extra else est
