"""Feature packs: the serialized unit of exchange for embedding matrices.

A pack is a labeled N x D float32 matrix (image features, or one textual
prototype per class) plus class metadata.  The byte layout is fixed:

    bytes 0-3   ASCII "CNDP"
    bytes 4-7   u32 LE version (currently 1)
    bytes 8-11  u32 LE header length
    header      UTF-8 JSON, keys in order:
                dataset, split, kind, dim, count, num_classes,
                class_names, normalized, seed
    payload     count*dim float32 LE, row-major
    labels      count u32 LE

Packs are immutable after construction; all mutating operations return a
new pack.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DegenerateVectorError, FormatError, ParameterError, ValidationError
from .rng import Rng

PACK_MAGIC = b"CNDP"
PACK_VERSION = 1

# Synthetic-geometry constant: weight of the shared cone axis relative to the
# per-class signal component (axis norm = weight * sqrt(rank)).  Higher values
# tighten the embedding cone, as observed for real CLIP features.
CONE_AXIS_WEIGHT = 0.5
_HEADER_KEYS = (
    "dataset",
    "split",
    "kind",
    "dim",
    "count",
    "num_classes",
    "class_names",
    "normalized",
    "seed",
)


@dataclass(frozen=True, eq=False)
class FeaturePack:
    kind: str  # "image" | "text"
    features: np.ndarray  # (count, dim) float32
    labels: np.ndarray  # (count,) uint32, values in [0, num_classes)
    class_names: tuple[str, ...]
    normalized: bool
    seed: int | None = None
    dataset: str = ""
    split: str = ""

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def count(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def validate_pack(pack: FeaturePack) -> None:
    """Raise ValidationError naming the offending field if any invariant fails."""
    if pack.kind not in ("image", "text"):
        raise ValidationError(f"kind: expected 'image' or 'text', got {pack.kind!r}")
    f = pack.features
    if f.ndim != 2 or f.dtype != np.float32:
        raise ValidationError("features: expected a 2-D float32 matrix")
    if f.shape[0] < 1 or f.shape[1] < 1:
        raise ValidationError("features: count and dim must be positive")
    if pack.labels.ndim != 1 or pack.labels.shape[0] != f.shape[0]:
        raise ValidationError("labels: expected one label per feature row")
    k = pack.num_classes
    if k < 1:
        raise ValidationError("class_names: at least one class required")
    if len(set(pack.class_names)) != k:
        raise ValidationError("class_names: names must be unique")
    labels = pack.labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"labels: values must lie in [0, {k})")
    if pack.kind == "text":
        if pack.count != k:
            raise ValidationError("count: text packs need exactly one row per class")
        if not np.array_equal(labels, np.arange(k)):
            raise ValidationError("labels: text packs must be labeled 0..K-1 in order")
    if pack.normalized:
        norms = np.linalg.norm(f.astype(np.float64), axis=1)
        bad = np.nonzero(np.abs(norms - 1.0) > 1e-5)[0]
        if bad.size:
            raise ValidationError(
                f"normalized: row {int(bad[0])} has norm {norms[bad[0]]:.8f}, expected 1"
            )


def _as_sink(destination) -> tuple[BinaryIO, bool]:
    if isinstance(destination, (str, Path)):
        return open(destination, "wb"), True
    return destination, False


def _as_source(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        return open(source, "rb"), True
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(source), True
    return source, False


def write_pack(pack: FeaturePack, destination) -> None:
    """Serialize a validated pack to a path or binary sink, bit-exactly."""
    validate_pack(pack)
    header = {
        "dataset": pack.dataset,
        "split": pack.split,
        "kind": pack.kind,
        "dim": pack.dim,
        "count": pack.count,
        "num_classes": pack.num_classes,
        "class_names": list(pack.class_names),
        "normalized": pack.normalized,
        "seed": pack.seed,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    sink, owned = _as_sink(destination)
    try:
        sink.write(PACK_MAGIC)
        sink.write(struct.pack("<I", PACK_VERSION))
        sink.write(struct.pack("<I", len(header_bytes)))
        sink.write(header_bytes)
        sink.write(np.ascontiguousarray(pack.features, dtype="<f4").tobytes())
        sink.write(np.ascontiguousarray(pack.labels, dtype="<u4").tobytes())
    finally:
        if owned:
            sink.close()


def read_pack(source) -> FeaturePack:
    """Parse a pack from a path, bytes, or binary source; rejects malformed input."""
    src, owned = _as_source(source)
    try:
        magic = src.read(4)
        if magic != PACK_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0, expected {PACK_MAGIC!r}")
        raw = src.read(4)
        if len(raw) < 4:
            raise FormatError("truncated version field at offset 4")
        (version,) = struct.unpack("<I", raw)
        if version != PACK_VERSION:
            raise FormatError(f"unsupported version {version} at offset 4")
        raw = src.read(4)
        if len(raw) < 4:
            raise FormatError("truncated header length at offset 8")
        (header_len,) = struct.unpack("<I", raw)
        header_bytes = src.read(header_len)
        if len(header_bytes) != header_len:
            raise FormatError(
                f"truncated header at offset 12: expected {header_len} bytes,"
                f" got {len(header_bytes)}"
            )
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unparsable header at offset 12: {exc}") from exc
        missing = [k for k in _HEADER_KEYS if k not in header]
        if missing:
            raise FormatError(f"header missing keys {missing}")
        count, dim = int(header["count"]), int(header["dim"])
        payload_offset = 12 + header_len
        expected = count * dim * 4 + count * 4
        payload = src.read()
        if len(payload) != expected:
            raise FormatError(
                f"payload length mismatch at offset {payload_offset}:"
                f" expected {expected} bytes, got {len(payload)}"
            )
        features = np.frombuffer(payload, dtype="<f4", count=count * dim).reshape(count, dim)
        labels = np.frombuffer(payload, dtype="<u4", offset=count * dim * 4, count=count)
        pack = FeaturePack(
            kind=header["kind"],
            features=features.copy(),
            labels=labels.copy(),
            class_names=tuple(header["class_names"]),
            normalized=bool(header["normalized"]),
            seed=header["seed"],
            dataset=header["dataset"],
            split=header["split"],
        )
        validate_pack(pack)
        return pack
    finally:
        if owned:
            src.close()


def l2_normalize(pack: FeaturePack) -> FeaturePack:
    """Scale every row to unit Euclidean norm; rejects zero rows."""
    f = pack.features.astype(np.float64)
    norms = np.linalg.norm(f, axis=1)
    dead = np.nonzero(norms < 1e-12)[0]
    if dead.size:
        raise DegenerateVectorError(f"row {int(dead[0])} has zero norm")
    out = (f / norms[:, None]).astype(np.float32)
    return replace(pack, features=out, normalized=True)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for CLIP-like synthetic feature geometry.

    ``intra_class_spread`` and ``text_noise`` are standard deviations of the
    isotropic Gaussian perturbations applied per image sample and per class
    text prototype respectively.
    """

    num_classes: int
    dim: int
    samples_per_class: int
    text_noise: float = 0.0
    intra_class_spread: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.dim < 2:
            raise ParameterError("dim must be >= 2")
        if self.samples_per_class < 1:
            raise ParameterError("samples_per_class must be >= 1")
        if self.text_noise < 0:
            raise ParameterError("text_noise must be >= 0")
        if self.intra_class_spread <= 0:
            raise ParameterError("intra_class_spread must be > 0")


def _class_means(cfg: SynthConfig) -> np.ndarray:
    """Unit class means with CLIP-like geometry.

    Real image/text embedding spaces concentrate in a narrow cone whose
    discriminative directions span a low-rank subspace of the full width.
    We reproduce that: means are normalize(sqrt(r) * e + B g_c) where e is a
    shared cone axis, B an orthonormal basis of an r-dimensional signal
    subspace (r = max(2, D/4)), and g_c a per-class standard Gaussian.  The
    sqrt(r) axis weight makes the typical between-class cosine ~0.5.  The
    isotropic sample/text perturbations added later live in the full
    D-dimensional space, so most of their energy falls outside the signal
    subspace, as it does for real encoders.
    """
    rng = Rng(cfg.seed).split("class-means")
    d = cfg.dim
    r = max(2, round(d / 4))
    # Orthonormal frame via modified Gram-Schmidt (portable, unlike LAPACK QR):
    # column 0 is the cone axis, the rest span the signal subspace.
    ncols = min(r + 1, d)
    frame = rng.gaussians(d * ncols).reshape(d, ncols)
    for j in range(ncols):
        for i in range(j):
            frame[:, j] -= (frame[:, i] @ frame[:, j]) * frame[:, i]
        frame[:, j] /= np.linalg.norm(frame[:, j])
    axis, basis = frame[:, 0], frame[:, 1:]
    r = ncols - 1
    axis = CONE_AXIS_WEIGHT * np.sqrt(r) * axis
    means = np.empty((cfg.num_classes, d), dtype=np.float64)
    for c in range(cfg.num_classes):
        v = axis + basis @ rng.gaussians(r)
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise DegenerateVectorError(f"class mean {c} collapsed")
        means[c] = v / n
    return means


def synth_generate(cfg: SynthConfig, split: str = "train") -> tuple[FeaturePack, FeaturePack]:
    """Deterministic synthetic (image pack, text pack) pair.

    Class means are unit vectors drawn from cfg.seed only, so packs built for
    different ``split`` labels share geometry; the text pack is identical for
    every split.
    """
    cfg.validate()
    k, d = cfg.num_classes, cfg.dim
    means = _class_means(cfg)
    names = tuple(f"class_{i:03d}" for i in range(k))
    dataset = f"synth-{k}x{d}"

    img_rng = Rng(cfg.seed).split(f"samples:{split}")
    rows = np.empty((k * cfg.samples_per_class, d), dtype=np.float64)
    labels = np.empty(k * cfg.samples_per_class, dtype=np.uint32)
    for c in range(k):
        for s in range(cfg.samples_per_class):
            v = means[c] + cfg.intra_class_spread * img_rng.gaussians(d)
            n = np.linalg.norm(v)
            if n < 1e-12:
                raise DegenerateVectorError(f"synthetic sample for class {c} collapsed")
            i = c * cfg.samples_per_class + s
            rows[i] = v / n
            labels[i] = c
    image = FeaturePack(
        kind="image",
        features=rows.astype(np.float32),
        labels=labels,
        class_names=names,
        normalized=True,
        seed=cfg.seed,
        dataset=dataset,
        split=split,
    )

    if cfg.text_noise == 0.0:
        text_rows = means.copy()  # exact class means, bit for bit
    else:
        text_rng = Rng(cfg.seed).split("text-prototypes")
        text_rows = np.empty_like(means)
        for c in range(k):
            v = means[c] + cfg.text_noise * text_rng.gaussians(d)
            n = np.linalg.norm(v)
            if n < 1e-12:
                raise DegenerateVectorError(f"text prototype for class {c} collapsed")
            text_rows[c] = v / n
    text = FeaturePack(
        kind="text",
        features=text_rows.astype(np.float32),
        labels=np.arange(k, dtype=np.uint32),
        class_names=names,
        normalized=True,
        seed=cfg.seed,
        dataset=dataset,
        split="text",
    )
    return image, text
