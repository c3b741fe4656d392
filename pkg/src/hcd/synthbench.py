"""Procedural spurious-correlation benchmark.

Each 3 x H x W image carries two signals:

* a causal pattern: two bright dots whose relative placement (horizontal,
  vertical or one of the diagonals) encodes the class, centred at a random
  position away from the border and equal on all channels;
* a spurious cue: a colour cast over the whole image whose palette encodes
  the domain. Within a split the domain agrees with the class with
  probability ``rho``.

The palette sums to zero over channels while the dots add the same amount
to every channel, so the two signals occupy orthogonal colour subspaces.
Optional ``clutter`` scatters extra distractor dots; Gaussian noise covers
the whole image. The cue is linear in pixel values, so a plain classifier
picks it up first; reading the dots requires spatial composition.

Samples are generated from a counter-based stream keyed on
``(seed, split, index)``, so any sample can be regenerated independently.

Binary layout (one file per split, all little-endian)::

    magic       8 bytes   b"HCDSYN\\x00\\x00"
    version     u32       1
    header_len  u32       length of the JSON header in bytes
    header      utf-8 JSON {"spec": ..., "split": ..., "n": ..., "channels": 3,
                            "height": H, "width": W}
    images      f32[n, 3, H, W]
    y           u16[n]
    d           u16[n]
    causal_mask u8[n, H, W]
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"HCDSYN\x00\x00"
VERSION = 1
CHANNELS = 3
MARGIN = 2
PATTERN_SPAN = 3
SPLITS = ("train", "id_test", "ood_test")
_SPLIT_KEYS = {"train": 0, "id_test": 1, "ood_test": 2}
_MAX_CLASSES = 4


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 2000
    n_test: int = 1000
    height: int = 16
    width: int = 16
    causal_strength: float = 3.0
    spurious_strength: float = 1.0
    rho_train: float = 0.95
    rho_test: Optional[float] = None
    noise_std: float = 0.2
    n_domains: int = 2
    n_classes: int = 2
    clutter: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("rho_train", "rho_test"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not (self.causal_strength > 0 and self.spurious_strength > 0):
            raise ValueError("pattern strengths must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not 2 <= self.n_classes <= _MAX_CLASSES:
            raise ValueError(f"n_classes must be in [2, {_MAX_CLASSES}]")
        if self.n_domains < 2:
            raise ValueError("n_domains must be >= 2")
        if min(self.height, self.width) < 2 * MARGIN + PATTERN_SPAN:
            raise ValueError("image too small for the causal pattern")
        if self.clutter < 0:
            raise ValueError("clutter must be nonnegative")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("sample counts must be positive")

    @property
    def ood_rho(self) -> float:
        return 1.0 - self.rho_train if self.rho_test is None else self.rho_test

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SynthDataset:
    """One split. ``images`` is float64 ``(n, 3, H, W)`` (values are f32-exact)."""

    images: np.ndarray
    y: np.ndarray
    d: np.ndarray
    causal_mask: np.ndarray
    split: str
    spec: SynthSpec

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "SynthDataset":
        return SynthDataset(self.images[idx], self.y[idx], self.d[idx], self.causal_mask[idx],
                            self.split, self.spec)


def palette(domain: int) -> np.ndarray:
    """Colour cast for ``domain``: +1 on one channel, -1 on another (zero sum)."""
    color = np.zeros(CHANNELS)
    color[domain % CHANNELS] = 1.0
    color[(domain + 1 + domain // CHANNELS) % CHANNELS] = -1.0
    return color


def cue(spec: SynthSpec, domain: int) -> np.ndarray:
    """Per-channel offset the spurious cue adds to every pixel."""
    return palette(domain) * spec.spurious_strength


def _dot_offsets(label: int) -> list:
    half = PATTERN_SPAN // 2
    if label == 0:
        return [(0, -half), (0, half)]
    if label == 1:
        return [(-half, 0), (half, 0)]
    if label == 2:
        return [(-half, -half), (half, half)]
    return [(-half, half), (half, -half)]


def _sample(spec: SynthSpec, split: str, index: int, rho: float):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, _SPLIT_KEYS[split], index])))
    y = index % spec.n_classes
    agree = rng.random() < rho
    home = y % spec.n_domains
    if agree:
        d = home
    else:
        others = [k for k in range(spec.n_domains) if k != home]
        d = others[int(rng.integers(len(others)))]
    h, w = spec.height, spec.width
    img = rng.normal(0.0, 1.0, size=(CHANNELS, h, w)) * spec.noise_std
    half = PATTERN_SPAN // 2
    ci = int(rng.integers(MARGIN + half, h - MARGIN - half))
    cj = int(rng.integers(MARGIN + half, w - MARGIN - half))
    causal = np.zeros((h, w), dtype=bool)
    for di, dj in _dot_offsets(y):
        causal[ci + di, cj + dj] = True
    img[:, causal] += spec.causal_strength
    if spec.clutter:
        free = np.flatnonzero(~causal)
        dots = rng.choice(free, size=int(rng.integers(spec.clutter + 1)), replace=False)
        img.reshape(CHANNELS, -1)[:, dots] += spec.causal_strength
    img += cue(spec, d)[:, None, None]
    return img.astype(np.float32), y, d, causal


def generate_split(spec: SynthSpec, split: str) -> SynthDataset:
    if split not in _SPLIT_KEYS:
        raise ValueError(f"unknown split {split!r}")
    n = spec.n_train if split == "train" else spec.n_test
    rho = spec.ood_rho if split == "ood_test" else spec.rho_train
    images = np.empty((n, CHANNELS, spec.height, spec.width), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    d = np.empty(n, dtype=np.int64)
    masks = np.empty((n, spec.height, spec.width), dtype=bool)
    for i in range(n):
        images[i], y[i], d[i], masks[i] = _sample(spec, split, i, rho)
    return SynthDataset(images.astype(np.float64), y, d, masks, split, spec)


def generate(spec: SynthSpec):
    """Return ``(train, id_test, ood_test)``; a pure function of ``spec``."""
    return tuple(generate_split(spec, s) for s in SPLITS)


# ---------------------------------------------------------------------------
# serialisation


def to_bytes(ds: SynthDataset) -> bytes:
    n, c, h, w = ds.images.shape
    header = json.dumps({"spec": ds.spec.to_dict(), "split": ds.split, "n": n,
                         "channels": c, "height": h, "width": w}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
             ds.images.astype("<f4").tobytes(),
             ds.y.astype("<u2").tobytes(),
             ds.d.astype("<u2").tobytes(),
             ds.causal_mask.astype(np.uint8).tobytes()]
    return b"".join(parts)


def from_bytes(blob: bytes) -> SynthDataset:
    if blob[:8] != MAGIC:
        raise ValueError("not a synthetic dataset file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 16
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    n, c, h, w = header["n"], header["channels"], header["height"], header["width"]

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    images = take("<f4", n * c * h * w).reshape(n, c, h, w).astype(np.float64)
    y = take("<u2", n).astype(np.int64)
    d = take("<u2", n).astype(np.int64)
    mask = take(np.uint8, n * h * w).reshape(n, h, w).astype(bool)
    if off != len(blob):
        raise ValueError("trailing bytes in dataset file")
    return SynthDataset(images, y, d, mask, header["split"], SynthSpec.from_dict(header["spec"]))


def save(ds: SynthDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> SynthDataset:
    return from_bytes(Path(path).read_bytes())


def export_csv(ds: SynthDataset, directory) -> None:
    """Write ``labels.csv`` (index, y, d) and ``images.csv`` (index, pixels...)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "y", "d"])
        for i, (yy, dd) in enumerate(zip(ds.y, ds.d)):
            wr.writerow([i, int(yy), int(dd)])
    flat = ds.images.reshape(len(ds), -1).astype(np.float32)
    with open(out / "images.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index"] + [f"p{k}" for k in range(flat.shape[1])])
        for i, row in enumerate(flat):
            wr.writerow([i] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# evaluation protocol


def shortcut_gap(model, id_test: SynthDataset, ood_test: SynthDataset, batch_size: int = 256) -> float:
    """In-distribution minus out-of-distribution test accuracy."""
    from hcd.trainloop import accuracy

    return accuracy(model, id_test, batch_size) - accuracy(model, ood_test, batch_size)
