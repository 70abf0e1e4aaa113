"""Datasets: procedural shapes, IDX files, distilled-set containers, splits."""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cdstl.errors import (
    ArtifactIOError,
    ConfigError,
    CorruptionError,
    DataError,
    DataFormatError,
    StratificationError,
)
from cdstl.nncore.rng import Rng

SHAPE_NAMES = (
    "disk",
    "square",
    "cross",
    "triangle",
    "ring",
    "stripes-h",
    "stripes-v",
    "checker",
    "L-corner",
    "dot-grid",
)
RESOLUTIONS = (16, 32)


@dataclass(eq=False)
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    origin: np.ndarray | None = None  # indices into the parent dataset, when derived
    render_params: list[dict] | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.split == "train":
            missing = set(range(self.num_classes)) - set(np.unique(self.labels).tolist())
            if missing:
                raise DataError(f"train split is missing classes {sorted(missing)}")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.images.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        origin = idx if self.origin is None else self.origin[idx]
        params = None if self.render_params is None else [self.render_params[i] for i in idx]
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes, split or self.split, origin, params
        )

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
        )


def dataset_hash(ds: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<H", ds.num_classes))
    h.update(np.asarray(ds.images.shape, dtype="<i8").tobytes())
    h.update(ds.images.astype("<f8").tobytes())
    h.update(ds.labels.astype("<i8").tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# procedural shapes


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    box = (au <= 0.75) & (av <= 0.75)
    if cls == 0:
        return u**2 + v**2 <= 0.6**2
    if cls == 1:
        return np.maximum(au, av) <= 0.55
    if cls == 2:
        return ((au <= 0.2) & (av <= 0.75)) | ((av <= 0.2) & (au <= 0.75))
    if cls == 3:
        return (v >= -0.65) & (v <= 0.55) & (au <= (v + 0.65) * 0.6)
    if cls == 4:
        r2 = u**2 + v**2
        return (r2 >= 0.38**2) & (r2 <= 0.7**2)
    if cls == 5:
        return box & (np.floor((v + 0.75) / 0.375) % 2 == 0)
    if cls == 6:
        return box & (np.floor((u + 0.75) / 0.375) % 2 == 0)
    if cls == 7:
        return box & ((np.floor((u + 0.75) / 0.375) + np.floor((v + 0.75) / 0.375)) % 2 == 0)
    if cls == 8:
        return ((u >= -0.65) & (u <= -0.3) & (av <= 0.65)) | ((au <= 0.65) & (v >= 0.3) & (v <= 0.65))
    if cls == 9:
        m = np.zeros(u.shape, dtype=bool)
        for cu in (-0.5, 0.0, 0.5):
            for cv in (-0.5, 0.0, 0.5):
                m |= (u - cu) ** 2 + (v - cv) ** 2 <= 0.17**2
        return m
    raise ConfigError(f"no shape for class {cls}")


def render_shape(cls: int, resolution: int, dx: float, dy: float, scale: float, intensity: float) -> np.ndarray:
    """Noise-free [H, W] rendering of one class glyph under translation/scale jitter."""
    centers = np.arange(resolution) + 0.5
    half = scale * resolution / 2
    u, v = np.meshgrid((centers - (resolution / 2 + dx)) / half, (centers - (resolution / 2 + dy)) / half)
    return intensity * _shape_mask(cls, u, v).astype(np.float64)


def _draw_jitter(rng: Rng, resolution: int, jitter: float):
    dx, dy = rng.uniform(2, -jitter, jitter) * resolution
    scale = float(rng.uniform(1, 0.8, 1.15)[0])
    return float(dx), float(dy), scale


def render_sample(p: dict, resolution: int, noise_field: np.ndarray | None = None) -> np.ndarray:
    img = render_shape(p["label"], resolution, p["dx"], p["dy"], p["scale"], p["intensity"])
    if p.get("distractor") is not None:
        d = p["distractor"]
        img = np.maximum(img, render_shape(d["label"], resolution, d["dx"], d["dy"], d["scale"], d["intensity"]))
    if noise_field is not None:
        img = img + p["noise_amp"] * noise_field
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def make_shapes(
    seed: int,
    per_class: int,
    resolution: int = 16,
    classes: int = 4,
    *,
    noise: float = 0.35,
    clutter: float = 0.3,
    jitter: float = 0.12,
) -> LabeledDataset:
    """Grayscale parametric-shape dataset, exactly ``per_class`` samples per class.

    Difficulty varies per sample: the noise amplitude is ``noise * u**2``
    and with probability ``clutter`` a second glyph from a different class
    is overlaid at random strength. All render parameters are kept in
    ``render_params`` so any sample can be re-rendered. Pixels are
    quantised to multiples of 1/255 so the set survives an IDX round trip.
    """
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ConfigError(f"classes must be in [2, {len(SHAPE_NAMES)}], got {classes}")
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    if per_class < 2:
        raise ConfigError(f"per_class must be >= 2, got {per_class}")
    rng = Rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    n = labels.size
    images = np.empty((n, 1, resolution, resolution))
    params = []
    for i, c in enumerate(labels):
        s = rng.spawn("sample", i)
        dx, dy, scale = _draw_jitter(s, resolution, jitter)
        p = {
            "label": int(c),
            "dx": dx,
            "dy": dy,
            "scale": scale,
            "intensity": float(s.uniform(1, 0.75, 1.0)[0]),
            "noise_amp": float(noise * s.uniform(1)[0] ** 2),
            "distractor": None,
        }
        if clutter > 0 and s.uniform(1)[0] < clutter:
            other = int((c + 1 + s.integers(0, classes - 1)) % classes)
            ddx, ddy, dscale = _draw_jitter(s, resolution, jitter)
            p["distractor"] = {
                "label": other,
                "dx": ddx,
                "dy": ddy,
                "scale": dscale,
                "intensity": float(s.uniform(1, 0.3, 1.0)[0]),
            }
        field_ = s.normal((resolution, resolution)) if p["noise_amp"] > 0 else None
        images[i, 0] = render_sample(p, resolution, field_)
        params.append(p)
    return LabeledDataset(images, labels, classes, "train", None, params)


# --------------------------------------------------------------------------
# IDX

IDX_IMAGES_3D = 0x00000803
IDX_IMAGES_4D = 0x00000804
IDX_LABELS = 0x00000801


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


def _parse_idx(data: bytes, what: str) -> tuple[int, tuple[int, ...], bytes]:
    if len(data) < 4:
        raise DataFormatError(f"{what}: file shorter than the IDX magic", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    ndim = magic & 0xFF
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{what}: magic 0x{magic:08x} is not an unsigned-byte IDX file", 0)
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise DataFormatError(f"{what}: truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:hdr])
    need = int(np.prod(dims, dtype=np.int64))
    if len(data) - hdr < need:
        raise DataFormatError(f"{what}: payload truncated, need {need} bytes, have {len(data) - hdr}", len(data))
    if len(data) - hdr > need:
        raise DataFormatError(f"{what}: {len(data) - hdr - need} trailing bytes", hdr + need)
    return magic, dims, data[hdr:]


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Read an IDX3 (or channel-first IDX4) image file and an IDX1 label file."""
    magic, dims, payload = _parse_idx(_read(images_path), "images")
    if magic not in (IDX_IMAGES_3D, IDX_IMAGES_4D):
        raise DataFormatError(f"images: expected magic 0x{IDX_IMAGES_3D:08x}, got 0x{magic:08x}", 0)
    lmagic, ldims, lpayload = _parse_idx(_read(labels_path), "labels")
    if lmagic != IDX_LABELS:
        raise DataFormatError(f"labels: expected magic 0x{IDX_LABELS:08x}, got 0x{lmagic:08x}", 0)
    if ldims[0] != dims[0]:
        raise DataFormatError(f"label count {ldims[0]} disagrees with image count {dims[0]}", 4)
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    shape = (dims[0], 1, dims[1], dims[2]) if len(dims) == 3 else dims
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 0)
    return LabeledDataset(pixels.reshape(shape), labels, k, split)


def save_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write ``ds`` as unsigned-byte IDX. Pixels are rounded to the 1/255 grid."""
    n, c, h, w = ds.images.shape
    q = np.round(np.clip(ds.images, 0, 1) * 255).astype(np.uint8)
    if c == 1:
        head = struct.pack(">IIII", IDX_IMAGES_3D, n, h, w)
    else:
        head = struct.pack(">IIIII", IDX_IMAGES_4D, n, c, h, w)
    if ds.num_classes > 256:
        raise DataError("IDX labels are single bytes; more than 256 classes cannot be stored")
    try:
        Path(images_path).write_bytes(head + q.tobytes())
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n) + ds.labels.astype(np.uint8).tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write IDX files: {exc}") from exc


# --------------------------------------------------------------------------
# distilled-set container

DST_MAGIC = b"DST1"
SPACES = ("pixel", "latent")


@dataclass(eq=False)
class DistilledContainer:
    payload: np.ndarray  # [M, C, H, W] pixels or [M, d, h, w] latent codes
    labels: np.ndarray
    ipc: int
    num_classes: int
    space: str = "pixel"
    provenance: dict = field(default_factory=dict)
    history: list | None = None  # (iteration, loss, wall_ms); not persisted

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if self.space not in SPACES:
            raise DataError(f"space must be one of {SPACES}, got {self.space!r}")
        m = self.num_classes * self.ipc
        if self.payload.shape[0] != m or self.labels.shape[0] != m:
            raise DataError(f"container must hold K*ipc = {m} items, has {self.payload.shape[0]}")
        if not np.array_equal(np.bincount(self.labels, minlength=self.num_classes), np.full(self.num_classes, self.ipc)):
            raise DataError("labels must be exactly ipc copies of each class")
        if not np.all(np.isfinite(self.payload)):
            raise DataError("payload contains non-finite values")
        if self.space == "latent" and not self.provenance.get("decoder_hash"):
            raise DataError("latent containers must record the decoder checkpoint hash")

    def equals(self, other: "DistilledContainer") -> bool:
        return (
            self.space == other.space
            and self.ipc == other.ipc
            and self.num_classes == other.num_classes
            and self.payload.shape == other.payload.shape
            and np.array_equal(self.payload, other.payload)
            and np.array_equal(self.labels, other.labels)
            and self.provenance == other.provenance
        )

    def as_dataset(self, split: str = "train") -> LabeledDataset:
        if self.space != "pixel":
            raise DataError("render latent containers before using them as a dataset")
        return LabeledDataset(self.payload, self.labels, self.num_classes, split)


def container_bytes(c: DistilledContainer) -> bytes:
    c.validate()
    buf = io.BytesIO()
    buf.write(DST_MAGIC)
    buf.write(struct.pack("<BHH", SPACES.index(c.space), c.num_classes, c.ipc))
    buf.write(struct.pack("<B", c.payload.ndim))
    buf.write(struct.pack(f"<{c.payload.ndim}I", *c.payload.shape))
    buf.write(c.payload.astype("<f8").tobytes())
    buf.write(c.labels.astype("<u2").tobytes())
    prov = json.dumps(c.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(prov)))
    buf.write(prov)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_distilled(c: DistilledContainer, path) -> str:
    """Write a DST1 file; returns its content hash."""
    data = container_bytes(c)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()[:16]


def parse_distilled(data: bytes) -> DistilledContainer:
    if len(data) < 8 or data[:4] != DST_MAGIC:
        raise DataFormatError(f"bad DST magic {data[:4]!r}", 0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("CRC32 mismatch; container file is corrupted", len(data) - 4)
    off = 4
    space_id, k, ipc = struct.unpack_from("<BHH", body, off)
    off += 5
    (rank,) = struct.unpack_from("<B", body, off)
    off += 1
    dims = struct.unpack_from(f"<{rank}I", body, off)
    off += 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    payload = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
    off += 8 * n
    labels = np.frombuffer(body, dtype="<u2", count=dims[0], offset=off).astype(np.int64)
    off += 2 * dims[0]
    (plen,) = struct.unpack_from("<I", body, off)
    off += 4
    provenance = json.loads(body[off : off + plen].decode("utf-8"))
    if off + plen != len(body):
        raise DataFormatError("unexpected bytes after provenance block", off + plen)
    if space_id >= len(SPACES):
        raise DataFormatError(f"unknown space id {space_id}", 4)
    return DistilledContainer(payload, labels, ipc, k, SPACES[space_id], provenance)


def load_distilled(path) -> DistilledContainer:
    return parse_distilled(_read(path))


# --------------------------------------------------------------------------
# splits


def stratified_holdout(ds: LabeledDataset, test_fraction: float, seed: int):
    """Per-class random holdout of ``floor(test_fraction * N_c)`` samples."""
    if not 0 < test_fraction < 0.5:
        raise ConfigError(f"test_fraction must be in (0, 0.5), got {test_fraction}")
    rng = Rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        members = ds.class_indices(c)
        if members.size < 2:
            raise StratificationError(f"class {c} has {members.size} samples; need at least 2 to stratify")
        n_test = int(np.floor(test_fraction * members.size))
        test_idx.append(members[rng.spawn("class", c).permutation(members.size)[:n_test]])
    test = np.sort(np.concatenate(test_idx))
    train = np.setdiff1d(np.arange(len(ds)), test)
    return ds.subset(train, "train"), ds.subset(test, "test")
