"""Versioned flat parameter dump.

Layout (all integers little-endian)::

    b"ARGP"            magic
    uint32             format version
    uint32             manifest length in bytes
    manifest           UTF-8 JSON: {"params": [{"name", "shape"}, ...], "vocab": {...}}
    float64[...]       payload, little-endian, parameters in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .scene import LabelVocab

MAGIC = b"ARGP"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def manifest_of(params: dict) -> list:
    return [{"name": k, "shape": list(v.shape)} for k, v in params.items()]


def _values(params: dict) -> dict:
    return {k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else np.asarray(v)) for k, v in params.items()}


def save_params(path, params: dict, vocab: LabelVocab | None = None) -> None:
    values = _values(params)
    manifest = {"params": manifest_of(values)}
    if vocab is not None:
        manifest["vocab"] = {"actions": list(vocab.actions), "groups": list(vocab.groups)}
    head = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for v in values.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path) -> tuple:
    """Returns ``(values, vocab)`` with ``values`` name -> float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: file too short for a params header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path}: not a params file (bad magic {magic!r})")
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported params version {version} (expected {VERSION})")
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise ConfigError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[_HEADER.size : start].decode("utf-8"))
        entries = [(e["name"], tuple(int(s) for s in e["shape"])) for e in manifest["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: corrupt manifest ({exc})") from None
    need = sum(int(np.prod(s)) for _, s in entries) * 8
    if len(raw) - start != need:
        raise ConfigError(f"{path}: payload is {len(raw) - start} bytes, manifest needs {need} (truncated or corrupt)")
    values = {}
    off = start
    for name, shape in entries:
        n = int(np.prod(shape))
        values[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += n * 8
    vocab = None
    if "vocab" in manifest:
        vocab = LabelVocab(tuple(manifest["vocab"]["actions"]), tuple(manifest["vocab"]["groups"]))
    return values, vocab


def check_manifest(values: dict, expected: dict) -> None:
    """Raise ConfigError listing both manifests when names or shapes differ."""
    got = manifest_of(values)
    want = manifest_of(_values(expected))
    if got != want:
        fmt = lambda m: "\n".join(f"  {e['name']}: {e['shape']}" for e in m)
        raise ConfigError(f"params file does not match the configured model\nfile manifest:\n{fmt(got)}\nconfig manifest:\n{fmt(want)}")
