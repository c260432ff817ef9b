"""Securing a pretrained generator: sign the training set, then fine-tune on it.

The signed dataset is precomputed and persisted so fine-tuning is ordinary
training; its manifest pins the injector checkpoint hash and the assigned
code, and fine-tuning refuses signed data produced by a different injector.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import ModelBundle, read_manifest, write_manifest
from .config import Stage2Config, config_hash
from .core import BinaryCode, CoreError, ImageTensor, RngState, psnr_per_image, quantize_tensor
from .evaluate import balanced_accuracy, detection_rate, feature_fid
from .generators import GeneratorAdapter, load_generator, save_generator
from .models import CodeEmbedding, SignatureInjector, inject, predict_bits
from .tensorio import save_image_png


@dataclass
class SignedDataset:
    images: torch.Tensor  # quantized [N, C, H, W]
    code: BinaryCode
    manifest: dict = field(default_factory=dict)

    @property
    def tensor(self) -> ImageTensor:
        return ImageTensor(self.images, quantized=True)


def sign_dataset(
    injector: SignatureInjector,
    embedding: CodeEmbedding,
    images: torch.Tensor,
    code: BinaryCode,
    injector_hash: str,
    out_dir: str | Path | None = None,
    cfg_hash: str = "",
    parents: list[str] | None = None,
) -> SignedDataset:
    """Sign every image with one assigned code; optionally persist a PNG tree."""
    if code.is_zero:
        raise CoreError("generator code must be non-zero (all-zero is reserved for real images)")
    signed = inject(injector, embedding, ImageTensor(images, quantized=True), code, quantize=True)
    per_file_psnr = psnr_per_image(ImageTensor(images, quantized=True), signed)
    manifest = {
        "kind": "signed_dataset",
        "code": str(code),
        "injector_hash": injector_hash,
        "config_hash": cfg_hash,
        "count": int(images.shape[0]),
        "psnr_mean": float(np.mean(per_file_psnr)),
        "per_file_psnr": [round(v, 4) for v in per_file_psnr],
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for i in range(signed.batch_size):
            p = out_dir / f"signed_{i:05d}.png"
            save_image_png(ImageTensor(signed.data[i : i + 1], quantized=True), p)
            files.append(p.name)
        manifest = write_manifest(
            out_dir,
            kind="signed_dataset",
            cfg_hash=cfg_hash,
            seed=0,
            parents=parents,
            metrics={"psnr_mean": manifest["psnr_mean"]},
            extra={k: v for k, v in manifest.items() if k not in ("kind", "config_hash")},
            files=files,
        )
    return SignedDataset(images=signed.data, code=code, manifest=manifest)


def _guidance_closure(bundle: ModelBundle, config: Stage2Config):
    """Frozen-detector term added to the generator loss: xi * BCE toward the code."""
    xi = config.detector_guidance
    if xi == 0:
        return None
    detector = bundle.detector
    detector.eval()
    for p in detector.parameters():
        p.requires_grad_(False)
    target = config.code.as_tensor()

    def guidance(fake01: torch.Tensor) -> torch.Tensor:
        valid = quantize_tensor(fake01, grad_mode="straight_through")
        logits = detector.forward_logits(valid)
        return xi * F.binary_cross_entropy_with_logits(logits, target.expand_as(logits))

    return guidance


def finetune(
    adapter: GeneratorAdapter,
    signed: SignedDataset,
    config: Stage2Config,
    bundle: ModelBundle,
    run_dir: str | Path | None = None,
    embedder=None,
    eval_real: torch.Tensor | None = None,
    progress: bool = False,
) -> list[dict]:
    """Fine-tune a pretrained generator on signed data with its own loss.

    Refuses signed datasets whose manifest names a different injector than the
    supplied stage-1 bundle. Returns the per-interval metrics history.
    """
    if config.family != adapter.family:
        raise CoreError(f"config family {config.family!r} does not match adapter {adapter.family!r}")
    if signed.manifest.get("injector_hash") != bundle.injector_hash:
        raise CoreError(
            "signed dataset was produced by a different injector checkpoint "
            f"({signed.manifest.get('injector_hash', 'missing')[:12]} != {bundle.injector_hash[:12]})"
        )
    if str(signed.code) != str(config.code):
        raise CoreError(f"signed dataset code {signed.code} does not match config code {config.code}")

    adapter.set_learning_rate(adapter.config.learning_rate * 0.1)
    guidance = _guidance_closure(bundle, config)
    batch_rng = RngState(config.seed, f"stage2-{config.family}-{config.code}")
    images = signed.images
    history: list[dict] = []
    sample_rng_base = batch_rng.stream("eval-samples")
    for it in range(config.max_iterations):
        idx = torch.from_numpy(batch_rng.numpy.integers(0, images.shape[0], size=config.batch_size))
        record = adapter.train_step(images[idx], guidance=guidance)
        if (it + 1) % config.eval_interval == 0 or it + 1 == config.max_iterations:
            samples = adapter.sample(256, sample_rng_base)
            det = detection_rate(bundle.detector, samples)
            row = {"iteration": it + 1, "detection_rate": det, **record}
            if embedder is not None and eval_real is not None and eval_real.shape[0] >= 2 * embedder.feature_dim:
                row["feature_fid"] = feature_fid(ImageTensor(eval_real, quantized=True), samples, embedder)
            history.append(row)
            if progress:
                print(f"  [ft-{config.family}/{config.code}] it={it + 1} det={det:.3f}", flush=True)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "history.json", "w") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
        save_generator(
            adapter,
            run_dir,
            parents=[signed.manifest.get("injector_hash", ""), config_hash(config)],
            metrics=history[-1] if history else {},
            extra={
                "stage2_config": {
                    "code": str(config.code),
                    "family": config.family,
                    "max_iterations": config.max_iterations,
                    "detector_guidance": config.detector_guidance,
                    "batch_size": config.batch_size,
                    "seed": config.seed,
                },
                "signed_dataset_manifest_hash": signed_manifest_hash(signed.manifest),
                "injector_hash": bundle.injector_hash,
                "detector_hash": bundle.detector_hash,
            },
            extra_files=["history.json"],
        )
    return history


def signed_manifest_hash(manifest: dict) -> str:
    import hashlib

    stable = {k: manifest[k] for k in ("code", "injector_hash", "count") if k in manifest}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def exact_match_rate(detector, samples: ImageTensor, code: BinaryCode, threshold: float = 0.5) -> float:
    probs = predict_bits(detector, samples)
    pred = (probs >= threshold).float()
    target = code.as_tensor().unsqueeze(0).expand_as(pred)
    return float((pred == target).all(dim=1).float().mean().item())


def real_rate(detector, images: ImageTensor, threshold: float = 0.5) -> float:
    return 1.0 - detection_rate(detector, images, threshold)


def multi_generator_run(
    pretrained_dir: str | Path,
    configs: list[Stage2Config],
    bundle: ModelBundle,
    train_images: torch.Tensor,
    test_images: torch.Tensor,
    sample_count: int = 1000,
    out_dir: str | Path | None = None,
    threshold: float = 0.5,
    progress: bool = False,
) -> dict:
    """Fine-tune one generator per code and report exact-code attribution.

    Requires n >= 2 and pairwise-distinct non-zero codes.
    """
    if bundle.config.n < 2:
        raise CoreError("attribution needs a multi-bit detector (n >= 2)")
    codes = [str(c.code) for c in configs]
    if len(set(codes)) != len(codes):
        raise CoreError(f"duplicate generator codes in {codes}")
    for cfg in configs:
        if cfg.code.n != bundle.config.n:
            raise CoreError(f"code {cfg.code} length does not match detector n={bundle.config.n}")

    rows = []
    for cfg in configs:
        adapter = load_generator(pretrained_dir)
        signed = sign_dataset(
            bundle.injector, bundle.embedding, train_images, cfg.code, bundle.injector_hash
        )
        run_dir = Path(out_dir) / f"ft_{cfg.family}_{cfg.code}" if out_dir is not None else None
        finetune(adapter, signed, cfg, bundle, run_dir=run_dir, progress=progress)
        samples = adapter.sample(sample_count, RngState(cfg.seed, f"attr-samples-{cfg.code}"))
        rows.append(
            {
                "code": str(cfg.code),
                "family": cfg.family,
                "exact_match": exact_match_rate(bundle.detector, samples, cfg.code, threshold),
                "detection_rate": detection_rate(bundle.detector, samples, threshold),
            }
        )
    real_row = real_rate(bundle.detector, ImageTensor(test_images, quantized=True), threshold)
    report = {
        "generators": rows,
        "real_decoded_as_real": real_row,
        "sample_count": sample_count,
        "threshold": threshold,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "attribution.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        with open(out_dir / "attribution.md", "w") as fh:
            fh.write(render_attribution_markdown(report))
    return report


def render_attribution_markdown(report: dict) -> str:
    lines = [
        "| source | code | exact-match | detected |",
        "|---|---|---|---|",
    ]
    for row in report["generators"]:
        lines.append(
            f"| {row['family']} | {row['code']} | {row['exact_match']:.3f} | {row['detection_rate']:.3f} |"
        )
    lines.append(f"| real | 00 | {report['real_decoded_as_real']:.3f} | - |")
    return "\n".join(lines) + "\n"
