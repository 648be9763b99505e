"""Synthetic datasets and the ``BPTT`` named-tensor container.

Container layout (all integers little-endian)::

    b"BPTT"  u32 version  u32 entry_count
    per entry:
        u16 name_len  name (utf-8)  u8 rank  u32 dims[rank]
        float64 payload, row-major, prod(dims) values
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"BPTT"
VERSION = 1
RECIPES = ("gaussian-blobs", "planted-frequency")


@dataclass
class SyntheticDataset:
    samples: list  # arrays n x patch_dim (or n x d when embedded)
    labels: list
    num_classes: int
    seed: int | None = None
    recipe: str | None = None
    embedded: bool = False

    def __len__(self):
        return len(self.samples)

    def subset(self, k: int, seed: int = 0) -> list:
        """``k`` samples drawn without replacement by a seeded permutation."""
        idx = np.random.default_rng(seed).permutation(len(self.samples))[:k]
        return [self.samples[i] for i in sorted(idx)]


def generate(recipe: str, num_classes: int, samples_per_class: int, seed: int, n: int = 16,
             patch_dim: int = 24, snr: float = 1.0) -> SyntheticDataset:
    """Seeded class-conditional patches.

    ``gaussian-blobs``: a per-class N(0,1) template plus N(0, 1/snr^2) noise.
    ``planted-frequency``: per-class sinusoid over the patch grid plus the same noise.
    ``snr=inf`` removes the noise.
    """
    if recipe not in RECIPES:
        raise ConfigError(f"unknown data recipe {recipe!r}; expected one of {RECIPES}")
    if min(num_classes, samples_per_class, n, patch_dim) < 1:
        raise ConfigError("dataset sizes must be positive")
    if not snr > 0:
        raise ConfigError("snr must be positive")
    noise_std = 0.0 if math.isinf(snr) else 1.0 / snr
    templates = []
    for c in range(num_classes):
        if recipe == "gaussian-blobs":
            templates.append(np.random.default_rng([seed, c]).standard_normal((n, patch_dim)))
        else:
            phase = np.random.default_rng([seed, c]).uniform(0, 2 * np.pi)
            i = np.arange(n)[:, None] / n
            j = np.arange(patch_dim)[None, :] / patch_dim
            templates.append(math.sqrt(2.0) * np.sin(2 * np.pi * ((c + 1) * i + (c % 3 + 1) * j) + phase))
    noise = np.random.default_rng([seed, num_classes, 0x5EED])
    samples, labels = [], []
    for c in range(num_classes):
        for _ in range(samples_per_class):
            eps = noise.standard_normal((n, patch_dim))
            samples.append(templates[c] + noise_std * eps)
            labels.append(c)
    return SyntheticDataset(samples, labels, num_classes, seed, recipe)


# -- tensor container ---------------------------------------------------------

def write_tensors(path, tensors: dict):
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    parts = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} does not fit the container limits")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def _take(buf, off, size, what):
    if off + size > len(buf):
        raise FormatError(f"truncated file while reading {what}: need {size} bytes, {len(buf) - off} left", off)
    return buf[off:off + size], off + size


def read_tensors(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    return parse_tensors(buf)


def parse_tensors(buf: bytes) -> dict:
    magic, off = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    head, off = _take(buf, off, 8, "header")
    version, count = struct.unpack("<II", head)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = {}
    for _ in range(count):
        start = off
        raw, off = _take(buf, off, 2, "name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, nlen, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", start + 2) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        raw, off = _take(buf, off, 1, "rank")
        rank = raw[0]
        raw, off = _take(buf, off, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", raw)
        size = 8 * math.prod(dims)
        raw, off = _take(buf, off, size, f"payload of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last entry", off)
    return out


# -- external pre-embedded tokens ---------------------------------------------

def load_token_file(path) -> SyntheticDataset:
    """Dataset from a container holding ``tokens.{i}`` (n x d) and optional ``labels``."""
    t = read_tensors(path)
    keys = [k for k in t if k.startswith("tokens.")]
    if any(not k[len("tokens."):].isdigit() for k in keys):
        raise FormatError("token entries must be named tokens.{integer}")
    keys.sort(key=lambda k: int(k[len("tokens."):]))
    if not keys:
        raise FormatError("container holds no tokens.{i} entries")
    samples = [t[k] for k in keys]
    labels = [int(v) for v in t["labels"].ravel()] if "labels" in t else [0] * len(samples)
    if len(labels) != len(samples):
        raise FormatError(f"{len(labels)} labels for {len(samples)} token entries")
    return SyntheticDataset(samples, labels, max(labels) + 1, embedded=True)


def save_token_file(path, samples, labels=None):
    tensors = {f"tokens.{i}": s for i, s in enumerate(samples)}
    if labels is not None:
        tensors["labels"] = np.asarray(labels, dtype=np.float64).reshape(1, -1)
    write_tensors(path, tensors)
