"""Export per-patient image folders to `.bagemb` bags plus a manifest.

Input layout: one directory per patient under the input root, each holding
that patient's image captures.  Rows of the emitted embedding matrix
follow sorted filename order (documented so downstream permutation tests
can shuffle safely).  Labels/captions come from an optional CSV sidecar
`patient_id,label,caption`; patients absent from the sidecar get neither.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .backbones import load_backbone
from .format import write_bagemb, write_manifest

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class ExportJob:
    input_root: Path
    output_dir: Path
    backbone: str = "vit_b_16"
    sidecar: Path | None = None
    weights: Path | None = None
    seed: int = 0
    split: str = "train"


@dataclass
class ExportSummary:
    d_v: int = 0
    patients_written: list[str] = field(default_factory=list)
    patients_omitted: list[str] = field(default_factory=list)
    images_skipped: list[str] = field(default_factory=list)


def _read_sidecar(path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"patient_id", "label", "caption"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(
                f"{path}: sidecar needs columns patient_id,label,caption")
        for row in reader:
            label = row["label"].strip()
            caption = row["caption"].strip()
            out[row["patient_id"]] = {
                "label": int(label) if label else None,
                "caption": caption or None,
            }
    return out


def export(job: ExportJob) -> ExportSummary:
    root = Path(job.input_root)
    if not root.is_dir():
        raise FileNotFoundError(f"input root {root} is not a directory")
    sidecar = _read_sidecar(job.sidecar) if job.sidecar else {}
    backbone = load_backbone(job.backbone, job.weights, job.seed)
    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = ExportSummary(d_v=backbone.d_v)
    entries = []
    for patient_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        pid = patient_dir.name
        images = []
        for img_path in sorted(patient_dir.iterdir()):
            if img_path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(img_path) as img:
                    images.append(img.convert("RGB"))
            except (UnidentifiedImageError, OSError) as e:
                warnings.warn(f"skipping unreadable image {img_path}: {e}")
                summary.images_skipped.append(str(img_path))
        if not images:
            warnings.warn(f"patient {pid!r} has no usable images; omitted")
            summary.patients_omitted.append(pid)
            continue

        emb = backbone.embed(images)
        meta = sidecar.get(pid, {})
        name = f"{pid}.bagemb"
        write_bagemb(out_dir / name, pid, emb,
                     label=meta.get("label"), caption=meta.get("caption"))
        entries.append({"path": name, "split": job.split, "tags": {}})
        summary.patients_written.append(pid)

    if not entries:
        raise ValueError(f"no patients exported from {root}")
    write_manifest(out_dir / "manifest.json", backbone.d_v, entries)
    return summary
