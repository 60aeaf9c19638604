"""Image-folder and prompt-template extraction into CNDP packs."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .cndp import write_pack
from .encoders import ClipStyleEncoder
from .preprocess import PIPELINE_ID, preprocess_image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".gif"}


@dataclass
class ExtractJob:
    root: Path
    model: str = "vit-b16-seeded"
    template: str = "a photo of a {class}"
    out_dir: Path = Path(".")
    batch_size: int = 16
    device: str = "cpu"

    skipped: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.template.count("{class}") != 1:
            raise ValueError("template must contain exactly one {class} placeholder")
        if not Path(self.root).is_dir():
            raise FileNotFoundError(f"dataset root {self.root} is not a directory")


def discover_classes(root: Path) -> list[tuple[str, list[Path]]]:
    """Sorted (class name, image paths) pairs, one per subdirectory."""
    classes = []
    for sub in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        files = sorted(p for p in sub.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
        classes.append((sub.name, files))
    if not classes:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    return classes


def extract_images(job: ExtractJob, encoder: ClipStyleEncoder) -> Path:
    """One row per readable image, labels by subdirectory order."""
    job.validate()
    classes = discover_classes(Path(job.root))
    names = [name for name, _ in classes]
    rows = []
    labels = []
    for label, (name, files) in enumerate(classes):
        kept = 0
        for path in files:
            try:
                with Image.open(path) as img:
                    rows.append(preprocess_image(img, encoder.image_size))
                kept += 1
            except (OSError, UnidentifiedImageError) as exc:
                print(f"warning: skipping unreadable image {path}: {exc}")
                job.skipped.append(str(path))
        if kept == 0:
            raise ValueError(f"class {name!r} has no readable images")
        labels.extend([label] * kept)
    feats = np.concatenate([
        encoder.encode_images(np.stack(rows[i : i + job.batch_size]))
        for i in range(0, len(rows), job.batch_size)
    ])
    out = Path(job.out_dir) / "images.cndp"
    write_pack(
        out, kind="image", features=feats,
        labels=np.asarray(labels, dtype=np.uint32), class_names=names,
        normalized=True, seed=None, dataset=Path(job.root).name, split="extracted",
    )
    return out


def extract_text(job: ExtractJob, encoder: ClipStyleEncoder, class_names: list[str]) -> Path:
    """One prompt per class through the template, in class order."""
    job.validate()
    if not class_names:
        raise ValueError("class_names must be non-empty")
    prompts = [job.template.replace("{class}", name.replace("_", " "))
               for name in class_names]
    feats = encoder.encode_texts(prompts)
    out = Path(job.out_dir) / "text.cndp"
    write_pack(
        out, kind="text", features=feats,
        labels=np.arange(len(class_names), dtype=np.uint32), class_names=class_names,
        normalized=True, seed=None, dataset=Path(job.root).name, split="text",
    )
    return out


def run_job(job: ExtractJob) -> dict:
    """Extract both packs and write the job manifest."""
    started = time.time()
    job.validate()
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = ClipStyleEncoder(job.model, job.device)
    classes = discover_classes(Path(job.root))
    image_path = extract_images(job, encoder)
    text_path = extract_text(job, encoder, [name for name, _ in classes])
    manifest = {
        "root": str(job.root),
        "model": job.model,
        "pretrained_weights": encoder.pretrained,
        "embedding_dim": encoder.dim,
        "template": job.template,
        "preprocessing": PIPELINE_ID,
        "batch_size": job.batch_size,
        "device": job.device,
        "skipped": job.skipped,
        "outputs": [str(image_path), str(text_path)],
        "duration_s": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
