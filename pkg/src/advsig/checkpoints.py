"""Checkpoint directories: per-network parameter blobs plus a JSON manifest.

Every manifest records the config hash that produced the artifact, its parent
artifact hashes (an acyclic provenance chain back to the raw data), the RNG
seed, and per-network parameter hashes so downstream stages can refuse
mismatched inputs.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import Stage1Config, _build, config_hash, to_dict
from .core import CoreError
from .models import (
    CodeEmbedding,
    FeatureEmbedder,
    RestorationNet,
    SignatureDetector,
    SignatureInjector,
)
from .tensorio import load_tensor_dict, save_tensor_dict, tensor_dict_hash

MANIFEST_NAME = "manifest.json"


def write_manifest(
    directory: str | Path,
    kind: str,
    cfg_hash: str,
    seed: int,
    parents: list[str] | None = None,
    metrics: dict | None = None,
    extra: dict | None = None,
    files: list[str] | None = None,
) -> dict:
    manifest = {
        "kind": kind,
        "config_hash": cfg_hash,
        "parent_hashes": parents or [],
        "seed": seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "metrics": metrics or {},
        "files": files or [],
    }
    if extra:
        manifest.update(extra)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise CoreError(f"no manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


@dataclass
class ModelBundle:
    """A versioned stage-1 checkpoint: injector, detector, code embedding,
    optional restoration snapshots and feature embedder, plus the manifest."""

    injector: SignatureInjector
    detector: SignatureDetector
    embedding: CodeEmbedding
    config: Stage1Config
    snapshots: list[RestorationNet] = field(default_factory=list)
    embedder: FeatureEmbedder | None = None
    step: int = 0
    metrics: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def injector_hash(self) -> str:
        return tensor_dict_hash(dict(self.injector.state_dict()))

    @property
    def detector_hash(self) -> str:
        return tensor_dict_hash(dict(self.detector.state_dict()))

    @property
    def embedding_hash(self) -> str:
        return tensor_dict_hash(dict(self.embedding.state_dict()))


def _arch_of(bundle: ModelBundle) -> dict:
    cfg = bundle.config
    return {
        "channels": 3,
        "n": cfg.n,
        "injector": {
            "base_width": cfg.injector_width,
            "stages": cfg.injector_stages,
            "embed_dim": cfg.embed_dim,
            "predict_residual": cfg.predict_residual,
        },
        "detector": {"base_width": cfg.detector_width, "blocks": cfg.detector_blocks},
        "restoration": {"base_width": cfg.restoration_width},
        "embedder": None
        if bundle.embedder is None
        else {
            "width": bundle.embedder.proj.in_features // 4,
            "feature_dim": bundle.embedder.feature_dim,
            "num_classes": bundle.embedder.head.out_features,
        },
    }


def save_bundle(bundle: ModelBundle, directory: str | Path, parents: list[str] | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if bundle.config.n > 1:
        dist = bundle.embedding.min_pairwise_distance()
        if not dist > 0:
            raise CoreError("distinct codes collapsed to identical embeddings; refusing to checkpoint")
    hashes = {}
    files = []
    for name, net in [
        ("injector", bundle.injector),
        ("detector", bundle.detector),
        ("embedding", bundle.embedding),
    ]:
        path = directory / f"{name}.atd"
        hashes[name] = save_tensor_dict(dict(net.state_dict()), path)
        files.append(path.name)
    snap_hashes = []
    for i, snap in enumerate(bundle.snapshots):
        path = directory / f"snapshot_{i:02d}.atd"
        snap_hashes.append(save_tensor_dict(dict(snap.state_dict()), path))
        files.append(path.name)
    if bundle.embedder is not None:
        path = directory / "embedder.atd"
        hashes["embedder"] = save_tensor_dict(dict(bundle.embedder.state_dict()), path)
        files.append(path.name)
    if (directory / "metrics.jsonl").exists():
        files.append("metrics.jsonl")
    manifest = write_manifest(
        directory,
        kind="stage1_bundle",
        cfg_hash=config_hash(bundle.config),
        seed=bundle.config.seed,
        parents=parents,
        metrics=bundle.metrics,
        extra={
            "arch": _arch_of(bundle),
            "stage1_config": to_dict(bundle.config),
            "step": bundle.step,
            "param_hashes": hashes,
            "snapshot_hashes": snap_hashes,
        },
        files=files,
    )
    bundle.manifest = manifest
    return manifest


def load_bundle(directory: str | Path) -> ModelBundle:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("kind") != "stage1_bundle":
        raise CoreError(f"{directory} is not a stage1 bundle (kind={manifest.get('kind')!r})")
    cfg = _build(Stage1Config, manifest["stage1_config"])
    arch = manifest["arch"]
    injector = SignatureInjector(channels=arch["channels"], **arch["injector"])
    detector = SignatureDetector(channels=arch["channels"], n_heads=cfg.n, base_width=arch["detector"]["base_width"], blocks=arch["detector"]["blocks"])
    embedding = CodeEmbedding(cfg.n, dim=arch["injector"]["embed_dim"])
    injector.load_state_dict(load_tensor_dict(directory / "injector.atd"))
    detector.load_state_dict(load_tensor_dict(directory / "detector.atd"))
    embedding.load_state_dict(load_tensor_dict(directory / "embedding.atd"))
    snapshots = []
    for path in sorted(directory.glob("snapshot_*.atd")):
        snap = RestorationNet(channels=arch["channels"], base_width=arch["restoration"]["base_width"])
        snap.load_state_dict(load_tensor_dict(path))
        snapshots.append(snap)
    embedder = None
    if (directory / "embedder.atd").exists() and arch.get("embedder"):
        e = arch["embedder"]
        embedder = FeatureEmbedder(channels=arch["channels"], width=e["width"], feature_dim=e["feature_dim"], num_classes=e["num_classes"])
        embedder.load_state_dict(load_tensor_dict(directory / "embedder.atd"))
        embedder.freeze()
    bundle = ModelBundle(
        injector=injector,
        detector=detector,
        embedding=embedding,
        config=cfg,
        snapshots=snapshots,
        embedder=embedder,
        step=manifest.get("step", 0),
        metrics=manifest.get("metrics", {}),
        manifest=manifest,
    )
    for net in (bundle.injector, bundle.detector, bundle.embedding):
        net.eval()
    return bundle


def save_embedder(embedder: FeatureEmbedder, directory: str | Path, cfg_hash: str, seed: int, parents: list[str] | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h = save_tensor_dict(dict(embedder.state_dict()), directory / "embedder.atd")
    return write_manifest(
        directory,
        kind="feature_embedder",
        cfg_hash=cfg_hash,
        seed=seed,
        parents=parents,
        extra={
            "param_hashes": {"embedder": h},
            "arch": {
                "width": embedder.proj.in_features // 4,
                "feature_dim": embedder.feature_dim,
                "num_classes": embedder.head.out_features,
            },
        },
        files=["embedder.atd"],
    )


def load_embedder(directory: str | Path) -> FeatureEmbedder:
    manifest = read_manifest(directory)
    arch = manifest["arch"]
    embedder = FeatureEmbedder(width=arch["width"], feature_dim=arch["feature_dim"], num_classes=arch["num_classes"])
    embedder.load_state_dict(load_tensor_dict(Path(directory) / "embedder.atd"))
    embedder.freeze()
    return embedder
