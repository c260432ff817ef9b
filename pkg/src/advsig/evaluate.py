"""Measurement: detector accuracy/ROC/AUC, feature Frechet distance,
transformation robustness, the restoration attack, and the lambda sweep.

Accuracy is always the balanced mean of per-class verdict rates (real images
judged real, generated images judged generated), so an uninformative detector
scores 0.5 on balanced sets.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

import torch.nn.functional as F

from .augment import battery
from .checkpoints import ModelBundle
from .config import Stage1Config
from .core import CoreError, ImageTensor, RngState, psnr_per_image, quantize_tensor, sample_code_batch
from .models import (
    FeatureEmbedder,
    RestorationNet,
    SignatureDetector,
    decode_batch,
    inject_batch,
    predict_bits,
)
from .stage1 import restoration_step, train_stage1
from .tensorio import save_image_grid


# ---------------------------------------------------------------------------
# ROC / AUC

@dataclass
class RocCurve:
    points: list[tuple[float, float]]  # (false_positive_rate, true_positive_rate)
    auc: float


def auc_pair_count(scores_real: np.ndarray, scores_gen: np.ndarray) -> float:
    """P(gen > real) + 0.5 P(gen == real), computed from joint ranks."""
    real = np.asarray(scores_real, dtype=np.float64)
    gen = np.asarray(scores_gen, dtype=np.float64)
    combined = np.concatenate([real, gen])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty_like(combined)
    ranks[order] = np.arange(1, combined.size + 1, dtype=np.float64)
    # average ranks over ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[real.size :].sum()
    m = gen.size
    n = real.size
    return float((rank_sum - m * (m + 1) / 2.0) / (m * n))


def roc_auc(scores_real: list[float], scores_gen: list[float]) -> RocCurve:
    """ROC over detector scores, higher meaning "more likely generated"."""
    if len(scores_real) == 0 or len(scores_gen) == 0:
        raise CoreError("roc_auc needs non-empty score lists")
    real = np.asarray(scores_real, dtype=np.float64)
    gen = np.asarray(scores_gen, dtype=np.float64)
    points = [(0.0, 0.0)]
    for threshold in np.unique(np.concatenate([real, gen]))[::-1]:
        fpr = float((real >= threshold).mean())
        tpr = float((gen >= threshold).mean())
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return RocCurve(points=points, auc=auc_pair_count(real, gen))


def roc_points_csv(curve: RocCurve, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("false_positive_rate,true_positive_rate\n")
        for fpr, tpr in curve.points:
            fh.write(f"{fpr:.6f},{tpr:.6f}\n")


# ---------------------------------------------------------------------------
# Feature Frechet distance

def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> tuple[float, bool]:
    """Frechet distance between Gaussians; returns (value, regularized_flag)."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    regularized = False
    for _ in range(2):
        try:
            sa = _sqrt_psd(cov_a)
            prod = sa @ cov_b @ sa
            prod = 0.5 * (prod + prod.T)
            vals = np.linalg.eigvalsh(prod)
            scale = max(float(np.abs(vals).max()), 1.0)
            if vals.min() < -1e-6 * scale:
                raise np.linalg.LinAlgError("significantly negative eigenvalue in product")
            trace_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
            diff = mu_a - mu_b
            value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
            return max(value, 0.0), regularized
        except np.linalg.LinAlgError:
            eye = np.eye(cov_a.shape[0])
            cov_a = cov_a + 1e-6 * eye
            cov_b = cov_b + 1e-6 * eye
            regularized = True
    raise CoreError("covariance square root failed even after regularization")


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> tuple[float, bool]:
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False).reshape(fa.shape[1], fa.shape[1])
    cov_b = np.cov(fb, rowvar=False).reshape(fb.shape[1], fb.shape[1])
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


def feature_fid(
    set_a: ImageTensor,
    set_b: ImageTensor,
    embedder: FeatureEmbedder,
    with_flag: bool = False,
):
    """Frechet distance between embedded feature distributions of two image sets."""
    k = embedder.feature_dim
    if set_a.batch_size < 2 * k or set_b.batch_size < 2 * k:
        raise CoreError(
            f"feature_fid needs at least 2*k={2 * k} samples per set, got {set_a.batch_size} and {set_b.batch_size}"
        )
    fa = embedder.embed(set_a).numpy()
    fb = embedder.embed(set_b).numpy()
    value, flag = frechet_from_features(fa, fb)
    return (value, flag) if with_flag else value


# ---------------------------------------------------------------------------
# Detector evaluation

def detector_scores(detector: SignatureDetector, images: ImageTensor) -> np.ndarray:
    """Per-image score: maximum head probability."""
    probs = predict_bits(detector, images)
    return probs.max(dim=1).values.numpy().astype(np.float64)


def detection_rate(detector: SignatureDetector, images: ImageTensor, threshold: float = 0.5) -> float:
    verdicts = decode_batch(predict_bits(detector, images), threshold)
    return float(np.mean([v.generated for v in verdicts])) if verdicts else 0.0


def balanced_accuracy(
    detector: SignatureDetector, real: ImageTensor, gen: ImageTensor, threshold: float = 0.5
) -> float:
    return 0.5 * ((1.0 - detection_rate(detector, real, threshold)) + detection_rate(detector, gen, threshold))


@dataclass
class EvalReport:
    accuracy: float
    real_accuracy: float
    gen_accuracy: float
    auc: float
    psnr_mean: float | None = None
    psnr_std: float | None = None
    bitwise_accuracy: float | None = None
    exact_match_accuracy: float | None = None
    feature_fid: float | None = None
    fid_regularized: bool = False
    per_transformation: dict = field(default_factory=dict)
    threshold: float = 0.5
    real_count: int = 0
    gen_count: int = 0
    config_hash: str = ""
    checkpoint_hashes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def eval_detector(
    detector: SignatureDetector,
    real_set: ImageTensor,
    gen_set: ImageTensor,
    threshold: float = 0.5,
    gen_codes: torch.Tensor | None = None,
    paired: bool = False,
    train_hashes: set[str] | None = None,
    cfg_hash: str = "",
    checkpoint_hashes: dict | None = None,
) -> EvalReport:
    """Balanced verdict accuracy plus code accuracy and ROC.

    ``train_hashes`` enables the train/test disjointness guard; ``paired``
    means gen_set[i] is the signed version of real_set[i], enabling PSNR stats.
    """
    if train_hashes:
        from .data import _image_hashes

        overlap = set(_image_hashes(real_set.data)) & set(train_hashes)
        if overlap:
            raise CoreError(f"evaluation set overlaps training data ({len(overlap)} images)")

    real_probs = predict_bits(detector, real_set)
    gen_probs = predict_bits(detector, gen_set)
    real_verdicts = decode_batch(real_probs, threshold)
    gen_verdicts = decode_batch(gen_probs, threshold)
    real_acc = float(np.mean([not v.generated for v in real_verdicts]))
    gen_acc = float(np.mean([v.generated for v in gen_verdicts]))
    curve = roc_auc(
        real_probs.max(dim=1).values.tolist(),
        gen_probs.max(dim=1).values.tolist(),
    )

    bitwise = exact = None
    if gen_codes is not None:
        pred_bits = (gen_probs >= threshold).float()
        matches = pred_bits == gen_codes
        bitwise = float(matches.float().mean().item())
        exact = float(matches.all(dim=1).float().mean().item())

    psnr_mean = psnr_std = None
    if paired:
        values = psnr_per_image(real_set, gen_set)
        psnr_mean = float(np.mean(values))
        psnr_std = float(np.std(values))

    return EvalReport(
        accuracy=0.5 * (real_acc + gen_acc),
        real_accuracy=real_acc,
        gen_accuracy=gen_acc,
        auc=curve.auc,
        psnr_mean=psnr_mean,
        psnr_std=psnr_std,
        bitwise_accuracy=bitwise,
        exact_match_accuracy=exact,
        threshold=threshold,
        real_count=real_set.batch_size,
        gen_count=gen_set.batch_size,
        config_hash=cfg_hash,
        checkpoint_hashes=checkpoint_hashes or {},
    )


def robustness_table(
    detector: SignatureDetector, samples: ImageTensor, threshold: float = 0.5
) -> dict[str, float]:
    """Detection rate after each battery transformation of generated samples."""
    table = {}
    for name, transformed in battery(samples):
        valid = ImageTensor(quantize_tensor(transformed.data), quantized=True)
        table[name] = detection_rate(detector, valid, threshold)
    return table


# ---------------------------------------------------------------------------
# Restoration attack

def train_attack_restorer(
    bundle: ModelBundle,
    train_images: torch.Tensor,
    iterations: int = 20000,
    batch_size: int = 24,
    seed: int = 777,
    progress: bool = False,
):
    """The malicious user's model: a fresh restorer fit to (signed, clean) pairs."""
    rng = RngState(seed, "attack")
    torch.manual_seed(rng.stream("init").derived_seed)
    m_net = RestorationNet(base_width=bundle.config.restoration_width)
    opt = torch.optim.Adam(m_net.parameters(), lr=bundle.config.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    codes = sample_code_batch(bundle.config.n, rng.stream("codes"), train_images.shape[0])
    signed = torch.empty_like(train_images)
    bundle.injector.eval()
    with torch.no_grad():
        for i in range(0, train_images.shape[0], 256):
            signed[i : i + 256] = inject_batch(
                bundle.injector, bundle.embedding, train_images[i : i + 256], codes[i : i + 256]
            )

    batch_rng = rng.stream("batches")
    for it in range(iterations):
        idx = torch.from_numpy(batch_rng.numpy.integers(0, train_images.shape[0], size=batch_size))
        loss = restoration_step(m_net, opt, signed[idx], train_images[idx])
        if progress and (it + 1) % 2000 == 0:
            print(f"  [attack] it={it + 1} loss={loss:.3e}", flush=True)
    m_net.eval()
    return m_net


def attack_eval(
    bundles: dict[str, ModelBundle],
    dataset,
    attack_iterations: int = 20000,
    threshold: float = 0.5,
    expected_settings: tuple[str, ...] = (),
    seed: int = 777,
    progress: bool = False,
) -> dict:
    """Restoration-attack table over available stage-1 settings.

    Each row trains a fresh attacker on (signed, clean) training pairs, then
    reports signing PSNR, detector accuracy on signed images, and detector
    accuracy on attacker-restored images (balanced against real test images).
    """
    report: dict = {"attack_iterations": attack_iterations, "settings": {}, "warnings": []}
    for name in expected_settings or tuple(bundles):
        if name not in bundles:
            msg = f"setting {name!r} skipped: no stage-1 checkpoint provided"
            warnings.warn(msg)
            report["warnings"].append(msg)
            continue
        bundle = bundles[name]
        m_net = train_attack_restorer(
            bundle, dataset.train_images, iterations=attack_iterations, seed=seed, progress=progress
        )
        test = dataset.test_images
        codes = sample_code_batch(bundle.config.n, RngState(seed, "attack-eval-codes"), test.shape[0])
        with torch.no_grad():
            signed = inject_batch(bundle.injector, bundle.embedding, test, codes)
            restored = quantize_tensor(m_net(signed).clamp(0.0, 1.0))
        clean_img = ImageTensor(test, quantized=True)
        signed_img = ImageTensor(signed, quantized=True)
        restored_img = ImageTensor(restored, quantized=True)
        row = {
            "psnr": float(np.mean(psnr_per_image(clean_img, signed_img))),
            "restored_psnr": float(np.mean(psnr_per_image(clean_img, restored_img))),
            "accuracy_signed": balanced_accuracy(bundle.detector, clean_img, signed_img, threshold),
            "accuracy_restored": balanced_accuracy(bundle.detector, clean_img, restored_img, threshold),
        }
        report["settings"][name] = row
    return report


# ---------------------------------------------------------------------------
# Lambda sweep

def lambda_sweep(
    lambdas: tuple[float, ...],
    base_config: Stage1Config,
    dataset,
    run_dir: str | Path | None = None,
    include_zero: bool = True,
    embedder: FeatureEmbedder | None = None,
    iterations: int | None = None,
    threshold: float = 0.5,
    progress: bool = False,
) -> list[dict]:
    """Train one stage-1 run per balance value on a shared seed and dataset."""
    values = list(lambdas) + ([0.0] if include_zero and 0.0 not in lambdas else [])
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in values:
        cfg = replace(base_config, lam=lam)
        if iterations is not None:
            cfg = replace(cfg, max_iterations=iterations)
        if progress:
            print(f"[sweep] lam={lam}", flush=True)
        bundle = train_stage1(cfg, dataset, progress=progress)
        test = dataset.test_tensor()
        codes = sample_code_batch(cfg.n, RngState(cfg.seed, "sweep-eval-codes"), test.batch_size)
        with torch.no_grad():
            signed = ImageTensor(
                inject_batch(bundle.injector, bundle.embedding, test.data, codes), quantized=True
            )
        report = eval_detector(bundle.detector, test, signed, threshold=threshold, gen_codes=codes, paired=True)
        fid = None
        if embedder is not None:
            fid = feature_fid(test, signed, embedder)
        rows.append(
            {
                "lam": lam,
                "psnr": report.psnr_mean,
                "accuracy": report.accuracy,
                "auc": report.auc,
                "feature_fid": fid,
            }
        )
        if run_dir is not None:
            save_image_grid(ImageTensor(signed.data[:16], quantized=True), run_dir / f"signed_lam_{lam:g}.png")
            with open(run_dir / "sweep.json", "w") as fh:
                json.dump(rows, fh, indent=2, sort_keys=True)
    if run_dir is not None:
        save_image_grid(ImageTensor(dataset.test_images[:16], quantized=True), run_dir / "clean_reference.png")
    return rows


# ---------------------------------------------------------------------------
# Baseline detector (trained on one generator's outputs, no injector involved)

def train_baseline_detector(
    real_images: torch.Tensor,
    gen_images: torch.Tensor,
    width: int = 16,
    blocks: int = 4,
    iterations: int = 3000,
    batch_size: int = 32,
    lr: float = 1e-4,
    seed: int = 31,
    progress: bool = False,
) -> SignatureDetector:
    """Plain real-vs-generated classifier; the stand-in for a conventional
    generated-image detector that never saw the signature system."""
    rng = RngState(seed, "baseline")
    torch.manual_seed(rng.stream("init").derived_seed)
    detector = SignatureDetector(base_width=width, n_heads=1, blocks=blocks)
    opt = torch.optim.Adam(detector.parameters(), lr=lr)
    batch_rng = rng.stream("batches")
    for it in range(iterations):
        ridx = torch.from_numpy(batch_rng.numpy.integers(0, real_images.shape[0], size=batch_size))
        gidx = torch.from_numpy(batch_rng.numpy.integers(0, gen_images.shape[0], size=batch_size))
        logits_r = detector.forward_logits(real_images[ridx])
        logits_g = detector.forward_logits(gen_images[gidx])
        loss = F.binary_cross_entropy_with_logits(
            logits_r, torch.zeros_like(logits_r)
        ) + F.binary_cross_entropy_with_logits(logits_g, torch.ones_like(logits_g))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if progress and (it + 1) % 1000 == 0:
            print(f"  [baseline] it={it + 1} loss={loss.item():.4f}", flush=True)
    detector.eval()
    return detector
