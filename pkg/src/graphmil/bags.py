"""Bags of patch embeddings: data model, `.bagemb` container, synthetic data.

A bag is one patient's unordered set of patch embeddings with an optional
bag-level binary label and an optional caption.  The on-disk `.bagemb`
layout (all integers little-endian) is:

    magic "BAGE" | u16 version=1 | u16 flags | u32 n_patches | u32 d_v |
    u8 label | u32 caption_len | caption utf-8 | u16 id_len | id utf-8 |
    n_patches * d_v little-endian float32, row-major

flags bit0 = label present, bit1 = caption present.  The label byte and the
caption length field are always written (zero when absent).  Embeddings are
stored as float32 (matching upstream encoder output) and loaded into
float64 matrices, so a round-trip is bit-exact whenever the in-memory
values are float32-representable; the synthetic generator guarantees that.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ContractError, Matrix

MAGIC = b"BAGE"
VERSION = 1
_FLAG_LABEL = 1
_FLAG_CAPTION = 2
_FIXED_HEADER = struct.Struct("<4sHHIIBI")  # through caption_len

REGION_NAMES = ("alpha", "beta", "gamma", "delta", "epsilon",
                "zeta", "eta", "theta", "iota", "kappa")


class BagFormatError(ValueError):
    """Base for `.bagemb` parse failures; `code` distinguishes the class."""

    code = "format"


class BadMagicError(BagFormatError):
    code = "bad_magic"


class VersionMismatchError(BagFormatError):
    code = "version_mismatch"


class TruncatedFileError(BagFormatError):
    code = "truncated"


class NonFiniteDataError(BagFormatError):
    code = "non_finite"


@dataclass(frozen=True)
class BagRecord:
    patient_id: str
    embeddings: Matrix
    label: int | None = None
    caption: str | None = None
    caption_tokens: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.embeddings.rows < 1:
            raise ContractError("a bag needs at least one patch")
        if self.label is not None and self.label not in (0, 1):
            raise ContractError(f"bag label must be 0 or 1, got {self.label!r}")

    @property
    def n_patches(self) -> int:
        return self.embeddings.rows

    @property
    def d_v(self) -> int:
        return self.embeddings.cols


@dataclass(frozen=True)
class Dataset:
    bags: tuple[BagRecord, ...]
    d_v: int
    splits: tuple[str, ...]

    def __post_init__(self):
        if len(self.bags) < 1:
            raise ContractError("a dataset needs at least one bag")
        if len(self.splits) != len(self.bags):
            raise ContractError("one split tag per bag required")
        for bag in self.bags:
            if bag.d_v != self.d_v:
                raise ContractError(
                    f"bag {bag.patient_id!r} has d_v={bag.d_v}, dataset d_v={self.d_v}")

    def subset(self, split: str) -> "Dataset":
        picked = [(b, s) for b, s in zip(self.bags, self.splits) if s == split]
        if not picked:
            raise ContractError(f"no bags with split {split!r}")
        return Dataset(tuple(b for b, _ in picked), self.d_v,
                       tuple(s for _, s in picked))


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls the synthetic microscopy regime: a few distinct regions, each
    captured several times with noise, no positions, one bag-level label."""

    region_count: int
    copies_per_region: int
    d_v: int
    region_separation: float
    noise_sigma: float
    positive_region_prob: float
    seed: int

    def __post_init__(self):
        if self.region_count < 1:
            raise ContractError("region_count must be >= 1")
        if self.copies_per_region < 1:
            raise ContractError("copies_per_region must be >= 1")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if self.d_v < 2:
            raise ContractError("d_v must be >= 2 (coordinate 0 carries the marker)")


@dataclass(frozen=True)
class SyntheticTruth:
    """Hidden per-patch ground truth emitted alongside a generated bag."""

    region_ids: tuple[int, ...]
    instance_labels: tuple[int, ...]
    region_malignant: tuple[bool, ...]
    centroids: Matrix


# ---------------------------------------------------------------------------
# .bagemb read/write

def write_bagemb(bag: BagRecord, path) -> None:
    flags = 0
    label_byte = 0
    if bag.label is not None:
        flags |= _FLAG_LABEL
        label_byte = bag.label
    caption_bytes = b""
    if bag.caption is not None:
        flags |= _FLAG_CAPTION
        caption_bytes = bag.caption.encode("utf-8")
    pid = bag.patient_id.encode("utf-8")
    if len(pid) > 0xFFFF:
        raise ContractError("patient id longer than 65535 bytes")

    data = bag.embeddings.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_FIXED_HEADER.pack(MAGIC, VERSION, flags,
                                    bag.n_patches, bag.d_v,
                                    label_byte, len(caption_bytes)))
        fh.write(caption_bytes)
        fh.write(struct.pack("<H", len(pid)))
        fh.write(pid)
        fh.write(data)


def read_bagemb(path) -> BagRecord:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than the 4-byte magic")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _FIXED_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated fixed header")
    _, version, flags, n_patches, d_v, label_byte, caption_len = \
        _FIXED_HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this reader handles {VERSION}")

    off = _FIXED_HEADER.size
    if len(raw) < off + caption_len + 2:
        raise TruncatedFileError(f"{path}: truncated caption/id section")
    caption = raw[off:off + caption_len].decode("utf-8") \
        if flags & _FLAG_CAPTION else None
    off += caption_len
    (id_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    if len(raw) < off + id_len:
        raise TruncatedFileError(f"{path}: truncated patient id")
    patient_id = raw[off:off + id_len].decode("utf-8")
    off += id_len

    need = n_patches * d_v * 4
    if len(raw) - off < need:
        raise TruncatedFileError(
            f"{path}: truncated payload, need {need} embedding bytes, "
            f"have {len(raw) - off}")
    flat = np.frombuffer(raw, dtype="<f4", count=n_patches * d_v, offset=off)
    if flat.size and not np.isfinite(flat).all():
        raise NonFiniteDataError(f"{path}: embedding payload contains NaN/Inf")
    emb = Matrix(flat.astype(np.float64).reshape(n_patches, d_v))
    return BagRecord(patient_id=patient_id, embeddings=emb,
                     label=label_byte if flags & _FLAG_LABEL else None,
                     caption=caption)


def inspect_header(path) -> dict:
    """Parse and describe a `.bagemb` file without keeping the payload."""
    bag = read_bagemb(path)
    return {
        "path": str(path),
        "patient_id": bag.patient_id,
        "n_patches": bag.n_patches,
        "d_v": bag.d_v,
        "label": bag.label,
        "caption": bag.caption,
    }


# ---------------------------------------------------------------------------
# dataset manifest

def write_manifest(path, d_v: int, entries: list[dict]) -> None:
    """entries: [{"path": relative filename, "split": tag, "tags": {...}}]."""
    doc = {"format": "graphmil-manifest", "version": 1, "d_v": d_v,
           "bags": entries}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_dataset(manifest_path, split: str | None = None) -> Dataset:
    mp = Path(manifest_path)
    try:
        doc = json.loads(mp.read_text())
    except json.JSONDecodeError as e:
        raise BagFormatError(f"{manifest_path}: not valid JSON: {e}") from e
    if doc.get("format") != "graphmil-manifest":
        raise BagFormatError(f"{manifest_path}: not a graphmil manifest")
    bags, splits = [], []
    for entry in doc["bags"]:
        if split is not None and entry.get("split") != split:
            continue
        bags.append(read_bagemb(mp.parent / entry["path"]))
        splits.append(entry.get("split", "train"))
    if not bags:
        raise ContractError(f"{manifest_path}: no bags selected"
                            + (f" for split {split!r}" if split else ""))
    return Dataset(tuple(bags), int(doc["d_v"]), tuple(splits))


# ---------------------------------------------------------------------------
# synthetic bags

def _separated_positions(rng: np.random.Generator, count: int, dim: int,
                         min_dist: float) -> np.ndarray:
    """i.i.d. Gaussian positions, rejection-sampled to pairwise min distance.

    The per-coordinate scale is min_dist/sqrt(dim), which keeps typical
    pairwise distances near min_dist*sqrt(2) without inflating the overall
    position variance (bag-level noise) in high dimensions."""
    scale = max(min_dist / np.sqrt(max(dim, 1)), 1e-12)
    out = np.zeros((count, dim))
    for r in range(count):
        for attempt in range(1000):
            cand = rng.normal(scale=scale, size=dim)
            if r == 0 or np.linalg.norm(out[:r] - cand, axis=1).min() >= min_dist:
                out[r] = cand
                break
            if attempt % 100 == 99:
                scale *= 1.3
        else:
            raise ContractError("could not place separated region positions")
    return out


def _template_caption(malignant: np.ndarray) -> str:
    pos = np.flatnonzero(malignant)
    if pos.size == 0:
        return "no malignant tissue found all regions appear benign"
    names = [REGION_NAMES[i % len(REGION_NAMES)] for i in pos]
    body = " and region ".join(names)
    return f"malignant tissue found in region {body}"


def generate_bag(spec: SyntheticSpec) -> tuple[BagRecord, SyntheticTruth]:
    """One synthetic bag: separated region centroids, each duplicated
    `copies_per_region` times with Gaussian noise, rows shuffled.

    Malignancy is carried by coordinate 0: malignant regions sit at
    +/- region_separation (random sign), benign regions at 0, so the label
    is recoverable from instances but not from a linear function of the
    bag mean.  Bag label is 1 iff any region is malignant.
    """
    rng = np.random.default_rng(spec.seed)
    malignant = rng.random(spec.region_count) < spec.positive_region_prob
    positions = _separated_positions(rng, spec.region_count, spec.d_v - 1,
                                     spec.region_separation)
    signs = np.where(rng.random(spec.region_count) < 0.5, -1.0, 1.0)
    centroids = np.zeros((spec.region_count, spec.d_v))
    centroids[:, 1:] = positions
    centroids[:, 0] = np.where(malignant, signs * spec.region_separation, 0.0)

    n = spec.region_count * spec.copies_per_region
    region_ids = np.repeat(np.arange(spec.region_count), spec.copies_per_region)
    patches = centroids[region_ids] + rng.normal(scale=spec.noise_sigma,
                                                 size=(n, spec.d_v))
    order = rng.permutation(n)
    patches = patches[order]
    region_ids = region_ids[order]

    # Round through float32 so .bagemb round-trips are bit-exact.
    patches = patches.astype(np.float32).astype(np.float64)
    centroids32 = centroids.astype(np.float32).astype(np.float64)

    instance_labels = malignant[region_ids].astype(int)
    bag_label = int(instance_labels.max())
    bag = BagRecord(patient_id=f"synth-{spec.seed:08d}",
                    embeddings=Matrix(patches),
                    label=bag_label,
                    caption=_template_caption(malignant))
    truth = SyntheticTruth(region_ids=tuple(int(r) for r in region_ids),
                           instance_labels=tuple(int(v) for v in instance_labels),
                           region_malignant=tuple(bool(m) for m in malignant),
                           centroids=Matrix(centroids32))
    return bag, truth


def make_synthetic_dataset(base: SyntheticSpec, n_bags: int, split: str,
                           seed0: int | None = None) -> tuple[Dataset, list[SyntheticTruth]]:
    """n_bags bags drawn from `base` with consecutive seeds."""
    start = base.seed if seed0 is None else seed0
    bags, truths = [], []
    for i in range(n_bags):
        spec = SyntheticSpec(base.region_count, base.copies_per_region, base.d_v,
                             base.region_separation, base.noise_sigma,
                             base.positive_region_prob, start + i)
        bag, truth = generate_bag(spec)
        bags.append(bag)
        truths.append(truth)
    return Dataset(tuple(bags), base.d_v, tuple([split] * n_bags)), truths


# ---------------------------------------------------------------------------
# pooling baselines

def max_pool_predict(bag: BagRecord, instance_scorer, threshold: float = 0.5) -> int:
    """Bag label from the max over per-instance scores: 1 iff any instance
    scores above `threshold`.  Invariant to patch order."""
    if bag.n_patches < 1:
        raise ContractError("max_pool_predict: empty bag")
    best = max(float(instance_scorer(row)) for row in bag.embeddings.data)
    return int(best > threshold)


def avgpool_predict(bag: BagRecord, f, g) -> float:
    """Aggregate-then-classify: g(mean_i f(x_i)).  Invariant to patch order."""
    if bag.n_patches < 1:
        raise ContractError("avgpool_predict: empty bag")
    feats = np.stack([np.asarray(f(row), dtype=np.float64)
                      for row in bag.embeddings.data])
    return float(g(feats.mean(axis=0)))
