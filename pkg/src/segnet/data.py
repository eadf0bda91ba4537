"""Bit-exact tensor/checkpoint file formats, synthetic dataset generation,
splitting, and batch iteration.

Tensor file format (magic ``SGT1``), all integers little-endian:

    "SGT1" | u32 dtype code (0 = float32, 1 = uint8) | u32 ndim |
    ndim x u32 extents | raw row-major payload

Checkpoint container (magic ``SGC1``):

    "SGC1" | u32 entry count | entries | u64 FNV-1a checksum

where each entry is ``u32 name length | UTF-8 name | tensor record`` and
the checksum covers every preceding byte of the file. Model configuration
and training seed ride along as a reserved ``__config__`` entry holding
JSON bytes as a uint8 tensor.

A dataset directory holds ``manifest.json`` (ids, file names, generator
seed; stable key order) plus one image tensor file and one 3-channel mask
tensor file per sample.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .seeding import rng_from

TENSOR_MAGIC = b"SGT1"
CHECKPOINT_MAGIC = b"SGC1"
CONFIG_ENTRY = "__config__"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.uint8)}


class FileFormatError(ValueError):
    """Malformed tensor or checkpoint file."""


# ---------------------------------------------------------------------------
# Sample types
# ---------------------------------------------------------------------------

@dataclass
class RegionMaskSet:
    """Nested binary masks: et is inside tc is inside wt."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        for name in ("wt", "tc", "et"):
            m = np.asarray(getattr(self, name), dtype=np.uint8)
            setattr(self, name, m)
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise ValueError("region masks must share one shape")

    @property
    def shape(self):
        return self.wt.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.wt, self.tc, self.et], axis=-1)

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "RegionMaskSet":
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError(f"expected (H,W,3) mask stack, got {arr.shape}")
        return cls(arr[:, :, 0], arr[:, :, 1], arr[:, :, 2])

    def nesting_ok(self) -> bool:
        return bool(np.all(self.et <= self.tc) and np.all(self.tc <= self.wt))


@dataclass
class Sample:
    image: np.ndarray
    masks: RegionMaskSet
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise ValueError(f"image must be (H,W,C), got {self.image.shape}")
        if self.image.shape[:2] != self.masks.shape:
            raise ValueError(
                f"image/mask shape mismatch: {self.image.shape[:2]} vs {self.masks.shape}")


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def all_ids(self) -> list:
        return list(self.train) + list(self.val) + list(self.test)

    def ids_for(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return list(getattr(self, name))


# ---------------------------------------------------------------------------
# Tensor file format
# ---------------------------------------------------------------------------

def write_tensor_file(arr: np.ndarray, path) -> None:
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FileFormatError(f"unsupported dtype {arr.dtype} (use float32 or uint8)")
    if arr.dtype == np.float32 and not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite tensor")
    with open(path, "wb") as fh:
        fh.write(_tensor_record(arr))


def _tensor_record(arr: np.ndarray) -> bytes:
    header = TENSOR_MAGIC + struct.pack("<II", _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    arr, offset = _parse_tensor_record(blob, 0, str(path))
    if offset != len(blob):
        raise FileFormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return arr


def _parse_tensor_record(blob: bytes, offset: int, ctx: str):
    if blob[offset:offset + 4] != TENSOR_MAGIC:
        raise FileFormatError(f"{ctx}: bad magic {blob[offset:offset + 4]!r}")
    offset += 4
    if len(blob) < offset + 8:
        raise FileFormatError(f"{ctx}: truncated header")
    code, ndim = struct.unpack_from("<II", blob, offset)
    offset += 8
    if code not in _CODE_DTYPES:
        raise FileFormatError(f"{ctx}: unknown dtype code {code}")
    if len(blob) < offset + 4 * ndim:
        raise FileFormatError(f"{ctx}: truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) < offset + nbytes:
        raise FileFormatError(
            f"{ctx}: truncated payload ({len(blob) - offset} of {nbytes} bytes)")
    arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
    return arr, offset + nbytes


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(path, state: dict, meta: dict) -> None:
    """Write named parameter arrays plus a JSON metadata entry, checksummed."""
    path = Path(path)
    entries = dict(state)
    if CONFIG_ENTRY in entries:
        raise ValueError(f"{CONFIG_ENTRY!r} is reserved")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries[CONFIG_ENTRY] = np.frombuffer(meta_bytes, dtype=np.uint8)
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", len(entries))
    for name in sorted(entries):
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += _tensor_record(np.asarray(entries[name]))
    body += struct.pack("<Q", fnv1a64(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Returns (state: name -> array, meta: dict); verifies the checksum."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise FileFormatError(f"{path}: truncated container")
    stored = struct.unpack_from("<Q", blob, len(blob) - 8)[0]
    if fnv1a64(blob[:-8]) != stored:
        raise FileFormatError(f"{path}: checksum mismatch")
    count = struct.unpack_from("<I", blob, 4)[0]
    offset = 8
    state = {}
    for _ in range(count):
        if len(blob) - 8 < offset + 4:
            raise FileFormatError(f"{path}: truncated entry header")
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = _parse_tensor_record(blob, offset, f"{path}:{name}")
        state[name] = arr
    if offset != len(blob) - 8:
        raise FileFormatError(f"{path}: {len(blob) - 8 - offset} unparsed bytes")
    if CONFIG_ENTRY not in state:
        raise FileFormatError(f"{path}: missing {CONFIG_ENTRY} entry")
    meta = json.loads(state.pop(CONFIG_ENTRY).tobytes().decode("utf-8"))
    return state, meta


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

# Per-channel mean intensity of each tissue class, loosely emulating the
# contrast profiles of four MRI modalities (T1, T1Gd, T2, FLAIR).
#                 background  brain  wt-rim  tc-rim   et
_CLASS_INTENSITY = np.array([
    [0.05, 0.55, 0.42, 0.35, 0.50],
    [0.05, 0.50, 0.45, 0.40, 0.95],
    [0.05, 0.40, 0.80, 0.72, 0.60],
    [0.05, 0.45, 0.90, 0.78, 0.65],
], dtype=np.float64)

_NOISE_SIGMA = 0.05


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float,
             theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dy + s * dx) / ry
    v = (-s * dy + c * dx) / rx
    return (u * u + v * v) <= 1.0


def _synthesize_one(size: int, rng: np.random.Generator, sample_id: str) -> Sample:
    s = float(size)
    brain_c = s / 2 + rng.uniform(-0.04, 0.04, size=2) * s
    brain_ax = rng.uniform(0.32, 0.42, size=2) * s
    brain = _ellipse(size, brain_c[0], brain_c[1], brain_ax[0], brain_ax[1],
                     rng.uniform(0, math.pi))

    wt_c = brain_c + rng.uniform(-0.12, 0.12, size=2) * s
    wt_ax = rng.uniform(0.10, 0.20, size=2) * s
    wt_th = rng.uniform(0, math.pi)
    wt = _ellipse(size, wt_c[0], wt_c[1], wt_ax[0], wt_ax[1], wt_th) & brain

    tc_c = wt_c + rng.uniform(-0.03, 0.03, size=2) * s
    tc_ax = wt_ax * rng.uniform(0.55, 0.80, size=2)
    tc_th = wt_th + rng.uniform(-0.3, 0.3)
    tc = _ellipse(size, tc_c[0], tc_c[1], tc_ax[0], tc_ax[1], tc_th) & wt

    et_c = tc_c + rng.uniform(-0.02, 0.02, size=2) * s
    et_ax = tc_ax * rng.uniform(0.45, 0.75, size=2)
    et_th = tc_th + rng.uniform(-0.3, 0.3)
    et = _ellipse(size, et_c[0], et_c[1], et_ax[0], et_ax[1], et_th) & tc

    # class index per pixel: 0 bg, 1 brain, 2 wt rim, 3 tc rim, 4 et
    classes = np.zeros((size, size), dtype=np.int64)
    classes[brain] = 1
    classes[wt] = 2
    classes[tc] = 3
    classes[et] = 4

    channels = []
    for ch in range(_CLASS_INTENSITY.shape[0]):
        base = _CLASS_INTENSITY[ch][classes]
        noisy = base + rng.normal(0.0, _NOISE_SIGMA, size=(size, size))
        channels.append(np.clip(noisy, 0.0, 1.0))
    image = np.stack(channels, axis=-1).astype(np.float32)
    masks = RegionMaskSet(wt.astype(np.uint8), tc.astype(np.uint8), et.astype(np.uint8))
    return Sample(image=image, masks=masks, id=sample_id)


def generate_synthetic_dataset(n: int, size: int, seed: int) -> list:
    """Deterministic nested-ellipse tumor phantoms with four image channels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 32 != 0 or size <= 0:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    samples = []
    for i in range(n):
        rng = rng_from(seed, i)
        samples.append(_synthesize_one(size, rng, f"s{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# Dataset directory
# ---------------------------------------------------------------------------

def save_dataset(samples: list, directory, seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        image_name = f"{sample.id}_image.sgt"
        mask_name = f"{sample.id}_masks.sgt"
        write_tensor_file(sample.image, directory / image_name)
        write_tensor_file(sample.masks.stack(), directory / mask_name)
        entries.append({"id": sample.id, "image": image_name, "masks": mask_name})
    manifest = {
        "format": "segnet-dataset-v1",
        "seed": seed,
        "size": int(samples[0].image.shape[0]) if samples else 0,
        "samples": entries,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory):
    """Returns (samples, manifest). Raises FileFormatError on a bad layout."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileFormatError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["samples"]:
        image = read_tensor_file(directory / entry["image"])
        masks = RegionMaskSet.from_stack(read_tensor_file(directory / entry["masks"]))
        samples.append(Sample(image=image, masks=masks, id=entry["id"]))
    return samples, manifest


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------

def split_dataset(ids: list, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then train = floor(r_train*n), val = floor(r_val*n),
    test = remainder. Ratio arithmetic is exact for decimal ratios."""
    ids = list(ids)
    if not ids:
        raise ValueError("empty dataset")
    fr = [Fraction(str(r)) for r in ratios]
    if len(fr) != 3 or sum(fr) != 1:
        raise ValueError(f"ratios must be 3 values summing to 1, got {ratios}")
    n = len(ids)
    order = rng_from(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(fr[0] * n)
    n_val = int(fr[1] * n)
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )


def batch_iter(samples: list, batch_size: int, shuffle_seed: int, epoch: int):
    """Deterministic per-epoch shuffle; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng_from(shuffle_seed, epoch).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]
