"""Dataset ingestion: a procedurally generated toy set plus PNG directory loading.

The toy set (multi-scale colored noise with one geometric overlay per image)
is deterministic from its seed and needs no downloads; the overlay class
doubles as the label the feature embedder trains on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import MANIFEST_NAME, write_manifest
from .config import DatasetSpec, config_hash
from .core import CoreError, ImageTensor, quantize_tensor
from .tensorio import load_image_png, save_image_png

TOY_CLASSES = ("circle", "square", "diamond", "stripes")


@dataclass
class ImageDataset:
    train_images: torch.Tensor
    test_images: torch.Tensor
    train_labels: torch.Tensor | None
    test_labels: torch.Tensor | None
    train_hashes: list[str]
    test_hashes: list[str]
    manifest: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return int(self.train_images.shape[-1])

    def train_tensor(self) -> ImageTensor:
        return ImageTensor(self.train_images, quantized=True)

    def test_tensor(self) -> ImageTensor:
        return ImageTensor(self.test_images, quantized=True)


def _image_hashes(images: torch.Tensor) -> list[str]:
    arr = torch.floor(images * 255 + 0.5).to(torch.uint8).numpy()
    return [hashlib.sha256(a.tobytes()).hexdigest()[:16] for a in arr]


def toy_images(count: int, size: int = 32, seed: int = 7) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate [count, 3, size, size] quantized images and class labels."""
    rng = np.random.default_rng(seed)
    bg = np.full((count, 3, size, size), 0.5, dtype=np.float32)
    # amplitude decays with spatial frequency: textured but interpolation-friendly
    scale = 2
    while scale <= size:
        coarse = rng.uniform(-1.0, 1.0, size=(count, 3, scale, scale)).astype(np.float32)
        lo, hi = 0.1 * (2.0 / scale) + 0.01, 0.3 * (2.0 / scale) + 0.02
        amp = rng.uniform(lo, hi, size=(count, 1, 1, 1)).astype(np.float32)
        up = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bilinear", align_corners=False)
        bg += amp * up.numpy()
        scale *= 2

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    labels = rng.integers(0, len(TOY_CLASSES), size=count)
    cx = rng.uniform(0.25 * size, 0.75 * size, size=count).astype(np.float32)
    cy = rng.uniform(0.25 * size, 0.75 * size, size=count).astype(np.float32)
    radius = rng.uniform(0.15 * size, 0.35 * size, size=count).astype(np.float32)
    color = rng.uniform(0.05, 0.95, size=(count, 3, 1, 1)).astype(np.float32)
    alpha = rng.uniform(0.5, 0.9, size=count).astype(np.float32)
    freq = rng.uniform(2.0, 5.0, size=(count, 2)).astype(np.float32)
    phase = rng.uniform(0.0, 2 * np.pi, size=count).astype(np.float32)

    dx = xs[None] - cx[:, None, None]
    dy = ys[None] - cy[:, None, None]
    r = radius[:, None, None]
    masks = np.zeros((count, size, size), dtype=np.float32)
    sel = labels == 0
    masks[sel] = (dx[sel] ** 2 + dy[sel] ** 2 < r[sel] ** 2).astype(np.float32)
    sel = labels == 1
    masks[sel] = (np.maximum(np.abs(dx[sel]), np.abs(dy[sel])) < 0.8 * r[sel]).astype(np.float32)
    sel = labels == 2
    masks[sel] = (np.abs(dx[sel]) + np.abs(dy[sel]) < 1.2 * r[sel]).astype(np.float32)
    sel = labels == 3
    wave = np.sin(
        2 * np.pi * (freq[sel, 0, None, None] * xs[None] + freq[sel, 1, None, None] * ys[None]) / size
        + phase[sel, None, None]
    )
    masks[sel] = (wave > 0.3).astype(np.float32)

    a = (alpha[:, None, None] * masks)[:, None]
    out = bg * (1.0 - a) + color * a
    images = quantize_tensor(torch.from_numpy(np.clip(out, 0.0, 1.0)))
    return images, torch.from_numpy(labels.astype(np.int64))


def _split(
    n: int, test_size: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    test = min(test_size, max(1, n // 5))
    perm = np.random.default_rng(seed).permutation(n)
    return perm[test:], perm[:test]


def ingest_dataset(spec: DatasetSpec, out_dir: str | Path | None = None) -> ImageDataset:
    """Load or generate the dataset and produce a fixed train/test split.

    With ``out_dir`` the split is materialized as a PNG tree plus manifest.
    """
    skipped: list[str] = []
    if spec.source == "toy":
        images, labels = toy_images(spec.count, spec.image_size, spec.split_seed)
    else:
        root = Path(spec.source)
        if not root.is_dir():
            raise CoreError(f"dataset directory not found: {root}")
        tensors = []
        for path in sorted(root.rglob("*.png")):
            try:
                img = load_image_png(path)
                if img.data.shape[-1] != spec.image_size or img.data.shape[-2] != spec.image_size:
                    raise CoreError(f"size {tuple(img.data.shape[-2:])} != {spec.image_size}")
                tensors.append(img.data)
            except Exception as exc:  # unreadable or wrong-size files are skipped, not fatal
                skipped.append(f"{path.name}: {exc}")
        if not tensors:
            raise CoreError(f"no readable {spec.image_size}x{spec.image_size} PNG images under {root}")
        images = torch.cat(tensors, dim=0)
        labels = None

    train_idx, test_idx = _split(images.shape[0], spec.test_size, spec.split_seed)
    ds = ImageDataset(
        train_images=images[train_idx].contiguous(),
        test_images=images[test_idx].contiguous(),
        train_labels=labels[train_idx] if labels is not None else None,
        test_labels=labels[test_idx] if labels is not None else None,
        train_hashes=[],
        test_hashes=[],
        skipped=skipped,
    )
    ds.train_hashes = _image_hashes(ds.train_images)
    ds.test_hashes = _image_hashes(ds.test_images)
    ds.manifest = {
        "kind": "dataset",
        "config_hash": config_hash(spec),
        "seed": spec.split_seed,
        "source": spec.source,
        "image_size": spec.image_size,
        "train_count": len(ds.train_hashes),
        "test_count": len(ds.test_hashes),
        "skipped_count": len(skipped),
        "skipped": skipped,
        "train_hashes": ds.train_hashes,
        "test_hashes": ds.test_hashes,
        "labels": TOY_CLASSES if labels is not None else None,
        "train_label_values": ds.train_labels.tolist() if ds.train_labels is not None else None,
        "test_label_values": ds.test_labels.tolist() if ds.test_labels is not None else None,
    }
    if out_dir is not None:
        materialize_dataset(ds, out_dir, spec)
    return ds


def materialize_dataset(ds: ImageDataset, out_dir: str | Path, spec: DatasetSpec) -> None:
    out_dir = Path(out_dir)
    files = []
    for split, images in (("train", ds.train_images), ("test", ds.test_images)):
        sub = out_dir / split
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(images.shape[0]):
            p = sub / f"img_{i:05d}.png"
            save_image_png(ImageTensor(images[i : i + 1], quantized=True), p)
            files.append(f"{split}/{p.name}")
    write_manifest(
        out_dir,
        kind="dataset",
        cfg_hash=config_hash(spec),
        seed=spec.split_seed,
        metrics={"train_count": len(ds.train_hashes), "test_count": len(ds.test_hashes)},
        extra={k: v for k, v in ds.manifest.items() if k not in ("kind", "config_hash", "seed")},
        files=files,
    )


def load_materialized(out_dir: str | Path) -> ImageDataset:
    out_dir = Path(out_dir)
    with open(out_dir / MANIFEST_NAME) as fh:
        manifest = json.load(fh)
    parts = {}
    for split in ("train", "test"):
        paths = sorted((out_dir / split).glob("*.png"))
        parts[split] = torch.cat([load_image_png(p).data for p in paths], dim=0)
    def _labels(key: str) -> torch.Tensor | None:
        values = manifest.get(key)
        return torch.tensor(values, dtype=torch.int64) if values else None

    ds = ImageDataset(
        train_images=parts["train"],
        test_images=parts["test"],
        train_labels=_labels("train_label_values"),
        test_labels=_labels("test_label_values"),
        train_hashes=manifest["train_hashes"],
        test_hashes=manifest["test_hashes"],
        manifest=manifest,
        skipped=manifest.get("skipped", []),
    )
    return ds
