"""Flat binary key -> tensor checkpoint.

Layout (all integers little-endian)::

    magic    8 bytes   b"GSFDACKP"
    version  u32       currently 1
    count    u32       number of entries
    entry*   count times:
        name_len u16, name (UTF-8)
        dtype    u8    0 = float64, 1 = int64
        ndim     u8
        shape    ndim x u64
        data     prod(shape) little-endian values, C order

Values are stored verbatim, so a save/load round trip is bit-exact.
Key prefixes: ``net.`` network tensors, ``att.<i>.e`` / ``att.<i>.scale``
attention embeddings, ``dc.`` domain classifier, ``exemplars.<i>`` stored
samples, ``meta.`` scalars.
"""
from __future__ import annotations

import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, ParseError
from .nn import PARAM_NAMES, NetworkParams
from .sda import DomainAttention, MaskSet

MAGIC = b"GSFDACKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


def save_tensors(path, tensors: Dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
            arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ParseError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(buf):
                raise ParseError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize,
                                      offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise ParseError(f"corrupt checkpoint: {exc}") from None
    return out


def save_checkpoint(path, params: NetworkParams, masks: MaskSet, dc=None,
                    exemplars: Optional[Dict[int, np.ndarray]] = None,
                    meta: Optional[Dict[str, float]] = None):
    t = {f"net.{k}": v for k, v in params.tensors().items()}
    t["net.trainable"] = np.array([int(params.trainable.get(n, False)) for n in PARAM_NAMES], np.int64)
    for att in masks.attentions:
        t[f"att.{att.domain_id}.e"] = att.e
        t[f"att.{att.domain_id}.scale"] = np.array([att.scale])
        t[f"att.{att.domain_id}.frozen"] = np.array([int(att.frozen)], np.int64)
    if dc is not None:
        t.update({f"dc.{k}": v for k, v in dc.tensors().items()})
    for i, x in (exemplars or {}).items():
        t[f"exemplars.{i}"] = x
    for k, v in (meta or {}).items():
        t[f"meta.{k}"] = np.array([v])
    save_tensors(path, t)


def load_checkpoint(path) -> Tuple[NetworkParams, MaskSet, object, Dict[int, np.ndarray], Dict[str, float]]:
    """Returns ``(params, masks, domain_classifier_or_None, exemplars, meta)``."""
    from .pipeline import DomainClassifier

    t = load_tensors(path)
    try:
        kw = {n: t[f"net.{n}"] for n in PARAM_NAMES + ("bn_mean", "bn_var")}
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks network tensor {exc}") from None
    flags = t.get("net.trainable")
    params = NetworkParams(**kw)
    if flags is not None:
        params.trainable = {n: bool(f) for n, f in zip(PARAM_NAMES, flags)}
    if "net.source_bn_mean" in t:
        params.source_bn_mean = t["net.source_bn_mean"]
        params.source_bn_var = t["net.source_bn_var"]
    ids = sorted(int(k.split(".")[1]) for k in t if k.startswith("att.") and k.endswith(".e"))
    masks = MaskSet([DomainAttention(i, t[f"att.{i}.e"], float(t[f"att.{i}.scale"][0]),
                                     bool(t.get(f"att.{i}.frozen", [0])[0])) for i in ids])
    dc = None
    if "dc.W1" in t:
        dc = DomainClassifier(*(t[f"dc.{k}"] for k in ("W1", "b1", "W2", "b2", "in_mean", "in_std")))
    exemplars = {int(k.split(".")[1]): v for k, v in t.items() if k.startswith("exemplars.")}
    meta = {k[5:]: float(v[0]) for k, v in t.items() if k.startswith("meta.")}
    return params, masks, dc, exemplars, meta
