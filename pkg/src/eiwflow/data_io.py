"""Datasets (IDX, npz, synthetic), the EIWFLOW1 checkpoint container and PGM/PPM export."""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class DataError(ValueError):
    """Base class for malformed input files."""


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class DimensionOverflowError(DataError):
    pass


class VersionError(DataError):
    pass


class ChecksumError(DataError):
    pass


class MissingTensorError(KeyError):
    pass


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MAX_IDX_ELEMENTS = 1 << 34


@dataclass
class Dataset:
    images: np.ndarray
    attributes: dict = field(default_factory=dict)
    split: str = "training"

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {imgs.shape}")
        if imgs.size and (imgs.min() < 0 or imgs.max() > 255):
            raise DataError("pixel values must lie in [0, 255]")
        if not np.array_equal(imgs, np.round(imgs)):
            raise DataError("pixel values must be integers")
        self.images = imgs.astype(np.uint8)
        for name, lab in self.attributes.items():
            lab = np.asarray(lab).astype(bool)
            if lab.shape != (len(imgs),):
                raise DataError(f"attribute {name!r} has {lab.shape[0]} labels for {len(imgs)} images")
            self.attributes[name] = lab

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], {k: v[idx] for k, v in self.attributes.items()},
                       self.split if split is None else split)

    def holdout(self, n_test):
        """First ``len - n_test`` images for training, the rest as the test split."""
        if not 0 < n_test < len(self):
            raise ValueError(f"n_test must be in (0, {len(self)})")
        cut = len(self) - n_test
        return self.subset(np.arange(cut), "training"), self.subset(np.arange(cut, len(self)), "test")


# --- IDX -----------------------------------------------------------------

def _read_idx(path, expect):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expect:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_IDX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: dimensions {dims} describe {count} elements")
    body = len(raw) - head
    if body != count:
        raise TruncatedError(f"{path}: expected {count} payload bytes after the header, found {body}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(path):
    """Image file (magic 0x803, dims N,H,W) as a single-channel dataset."""
    arr = _read_idx(path, IDX_IMAGES)
    return Dataset(arr[:, None].copy())


def load_idx_labels(path):
    return _read_idx(path, IDX_LABELS).copy()


def write_idx(path, images):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[:, 0]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


# --- npz and synthetic ---------------------------------------------------

def save_npz(path, ds):
    np.savez(path, images=ds.images, **{f"attr_{k}": v for k, v in ds.attributes.items()})


def load_npz(path):
    with np.load(path) as f:
        if "images" not in f:
            raise MissingTensorError(f"{path}: no 'images' array")
        imgs = f["images"]
        attrs = {k[5:]: f[k] for k in f.files if k.startswith("attr_")}
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    return Dataset(imgs, attrs)


SYNTH_KINDS = ("gaussian_blobs", "checker_textures", "gradient_shapes")


def synth_dataset(kind, n, resolution, seed, channels=1):
    """Seeded synthetic images with structured odd rows and noisy even rows.

    Each image interleaves two sources row by row. Odd rows carry a smooth,
    low-entropy pattern chosen by ``kind``; even rows carry i.i.d. uniform
    pixel noise. After a 2x2 squeeze the two sources land in different
    channels, so the ordering of channels matters for what gets propagated.
    Attributes ``bright`` and ``left`` label the pattern for manipulation.
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")
    if resolution % 2:
        raise DataError("resolution must be even")
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.meshgrid(np.arange(r) + 0.5, np.arange(r) + 0.5, indexing="ij")
    cx = rng.uniform(0.3, 0.7, n) * r
    cy = rng.uniform(0.3, 0.7, n) * r
    amp = rng.uniform(0.5, 1.0, n)
    size = rng.uniform(0.12, 0.25, n) * r
    base = np.empty((n, r, r))
    if kind == "gaussian_blobs":
        d2 = (xx - cx[:, None, None]) ** 2 + (yy - cy[:, None, None]) ** 2
        base = amp[:, None, None] * np.exp(-d2 / (2 * size[:, None, None] ** 2))
    elif kind == "checker_textures":
        period = np.maximum(2.0, size)
        phase = rng.uniform(0, 2 * np.pi, n)
        base = 0.5 + 0.5 * amp[:, None, None] * np.sin(
            2 * np.pi * xx / period[:, None, None] + phase[:, None, None]) * np.sin(
            2 * np.pi * yy / period[:, None, None])
    else:
        theta = rng.uniform(0, 2 * np.pi, n)
        ramp = (np.cos(theta)[:, None, None] * (xx - r / 2) + np.sin(theta)[:, None, None] * (yy - r / 2)) / r
        disk = ((xx - cx[:, None, None]) ** 2 + (yy - cy[:, None, None]) ** 2) < size[:, None, None] ** 2
        base = np.clip(0.5 + amp[:, None, None] * ramp + 0.3 * disk, 0, 1)
    base = np.repeat(base[:, None], channels, axis=1)
    pixels = np.round(base * 255.0)
    noise = rng.integers(0, 256, size=(n, channels, r // 2, r))
    pixels[:, :, 0::2, :] = noise
    attrs = {"bright": amp > 0.75, "left": cx < r / 2}
    return Dataset(np.clip(pixels, 0, 255).astype(np.uint8), attrs)


def load_dataset(kind="gaussian_blobs", path=None, resolution=16, n=2048, seed=0):
    """Dispatch on ``kind``: a synthetic generator name, ``idx`` or ``npz``."""
    if kind in SYNTH_KINDS:
        return synth_dataset(kind, n, resolution, seed)
    if path is None:
        raise DataError(f"dataset kind {kind!r} needs a path")
    if kind == "idx":
        ds = load_idx(path)
    elif kind == "npz":
        ds = load_npz(path)
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    if ds.shape[1] != resolution or ds.shape[2] != resolution:
        raise DataError(f"{path}: images are {ds.shape[1]}x{ds.shape[2]}, config says {resolution}")
    return ds


# --- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"EIWFLOW1"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict
    version: int = CKPT_VERSION

    def tensor(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise MissingTensorError(f"checkpoint has no tensor {name!r}") from None


def _pack(tensors, meta):
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        key = name.encode()
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        out.append(struct.pack("<Q", len(payload)) + payload)
    text = json.dumps(meta, sort_keys=True).encode()
    out.append(struct.pack("<Q", len(text)) + text)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def write_checkpoint(path, tensors, meta):
    """Atomically write ``tensors`` (name -> float array) and JSON-able ``meta``."""
    blob = _pack(tensors, meta)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not an EIWFLOW1 checkpoint")
    if len(raw) < 20:
        raise TruncatedError(f"{path}: checkpoint truncated")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    pos = 12
    count = struct.unpack_from("<I", body, pos)[0]
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        tensors[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    (tlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    meta = json.loads(body[pos:pos + tlen].decode())
    return Checkpoint(tensors, meta, version)


# --- image export --------------------------------------------------------

def to_bytes(images):
    """Clamp to [0, 1) and map to 0..255 with round-half-up."""
    x = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image_grid(images, path, columns):
    """Tile ``images`` [n, C, H, W] row-major into a binary PGM (C=1) or PPM (C=3)."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    if images.ndim == 3:
        images = images[None]
    n, C, H, W = images.shape
    if C not in (1, 3):
        raise DataError(f"cannot export {C}-channel images; use 1 or 3")
    columns = max(1, min(int(columns), n))
    rows = -(-n // columns)
    gh, gw = rows * H + rows - 1, columns * W + columns - 1
    grid = np.zeros((C, gh, gw), dtype=np.uint8)
    px = to_bytes(images)
    for i in range(n):
        r, c = divmod(i, columns)
        grid[:, r * (H + 1):r * (H + 1) + H, c * (W + 1):c * (W + 1) + W] = px[i]
    tag = b"P5" if C == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(tag + b" %d %d 255\n" % (gw, gh))
        fh.write(grid.transpose(1, 2, 0).tobytes())
    return gw, gh
