"""Batch inference over an image dataset, exported as raw (pre-softmax) logits.

Models resolve from a TorchScript file path or a torchvision model name;
datasets are ImageFolder-style directories (one subdirectory per class) or a
flat directory paired with a filename,label CSV. Inference runs in eval mode
under no_grad with a fixed seed, so re-exporting produces identical bytes.
"""

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .writer import write_cpl1

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


class ExportError(Exception):
    """Model or dataset could not be resolved, or inference failed."""


@dataclass
class ExportSpec:
    model: str
    data: str
    out: str
    batch_size: int = 32
    device: str = "cpu"
    image_size: int = 224
    labels_csv: str | None = None
    label_base: int = 1  # index base of CSV labels; output is always 1-based
    seed: int = 0
    pretrained: bool = False
    dataset_name: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ExportError(f"batch size must be >= 1, got {self.batch_size}")
        if self.label_base not in (0, 1):
            raise ExportError(f"label base must be 0 or 1, got {self.label_base}")
        if self.image_size < 1:
            raise ExportError(f"image size must be >= 1, got {self.image_size}")


def resolve_model(spec: ExportSpec) -> torch.nn.Module:
    path = Path(spec.model)
    if path.suffix in (".pt", ".pts", ".ts") or path.exists():
        try:
            model = torch.jit.load(str(path), map_location=spec.device)
        except Exception as e:
            raise ExportError(f"cannot load TorchScript model {spec.model!r}: {e}")
    else:
        try:
            from torchvision import models

            weights = "DEFAULT" if spec.pretrained else None
            torch.manual_seed(spec.seed)
            model = models.get_model(spec.model, weights=weights)
        except ExportError:
            raise
        except Exception as e:
            raise ExportError(f"cannot resolve model {spec.model!r}: {e}")
    model.eval()
    return model.to(spec.device)


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def resolve_dataset(spec: ExportSpec) -> tuple[list[Path], np.ndarray, list[str]]:
    """(image paths, 1-indexed labels, class names) in deterministic order."""
    root = Path(spec.data)
    if not root.is_dir():
        raise ExportError(f"dataset directory {spec.data!r} does not exist")
    if spec.labels_csv:
        paths, labels = [], []
        with open(spec.labels_csv, newline="") as f:
            for row in csv.reader(f):
                if not row or row[0] == "filename":
                    continue
                paths.append(root / row[0])
                labels.append(int(row[1]))
        if not paths:
            raise ExportError(f"no labeled rows in {spec.labels_csv!r}")
        labels = np.asarray(labels, dtype=np.int64)
        if spec.label_base == 0:
            labels = labels + 1
        if labels.min() < 1:
            raise ExportError("labels must be positive after 1-base normalization")
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise ExportError(f"listed images missing on disk: {missing[:3]}")
        return paths, labels, []
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if class_dirs:
        paths, labels = [], []
        for idx, cdir in enumerate(class_dirs):
            for img in _list_images(cdir):
                paths.append(img)
                labels.append(idx + 1)
        if not paths:
            raise ExportError(f"no images under class directories of {spec.data!r}")
        return paths, np.asarray(labels, dtype=np.int64), [d.name for d in class_dirs]
    raise ExportError(
        f"{spec.data!r} has neither class subdirectories nor a labels CSV"
    )


def _load_batch(paths: list[Path], size: int) -> torch.Tensor:
    arrays = []
    for p in paths:
        with Image.open(p) as img:
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
            arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
    batch = np.stack(arrays).transpose(0, 3, 1, 2)
    return torch.from_numpy(batch)


def export(spec: ExportSpec) -> dict:
    """Run the model over the dataset and write a CPL1 file.

    Returns a summary dict including the exporter-side top-1 accuracy.
    A failed export leaves no partial file behind.
    """
    model = resolve_model(spec)
    paths, labels, class_names = resolve_dataset(spec)
    torch.manual_seed(spec.seed)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(paths), spec.batch_size):
            batch = _load_batch(paths[start : start + spec.batch_size], spec.image_size)
            out = model(batch.to(spec.device))
            if out.ndim != 2:
                raise ExportError(f"model output must be N x K logits, got shape {tuple(out.shape)}")
            chunks.append(out.cpu().to(torch.float32).numpy())
    logits = np.concatenate(chunks, axis=0)
    if not np.all(np.isfinite(logits)):
        raise ExportError("model produced non-finite logits")
    if labels.max() > logits.shape[1]:
        raise ExportError(
            f"labels reach class {int(labels.max())} but the model has "
            f"only {logits.shape[1]} outputs"
        )
    accuracy = float(np.mean(np.argmax(logits, axis=1) + 1 == labels))
    tags = dict(spec.tags)
    tags.update({"source": "cpl-exporter", "num_images": len(paths)})
    if class_names:
        tags["class_dirs"] = class_names
    tmp = str(spec.out) + ".tmp"
    try:
        write_cpl1(
            tmp, logits, labels,
            dataset=spec.dataset_name or Path(spec.data).name,
            model=spec.model,
            tags=tags,
        )
        os.replace(tmp, spec.out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return {
        "out": str(spec.out),
        "n": int(logits.shape[0]),
        "k": int(logits.shape[1]),
        "top1_accuracy": accuracy,
    }
