"""Resumable builders for the full desk-scale experiment battery.

Each ``ensure_*`` function loads its artifact from the given root if present,
otherwise builds and persists it. ``run_all`` chains everything the summary
tables need; scripts/run_all.py and the acceptance suite share these builders,
so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import torch

from . import checkpoints, evaluate, generators, stage1, stage2
from .config import DatasetSpec, EvalConfig, GeneratorConfig, Stage1Config, Stage2Config
from .core import BinaryCode, ImageTensor, RngState, sample_code_batch
from .data import ImageDataset, ingest_dataset
from .models import fit_feature_embedder, inject_batch
from .checkpoints import MANIFEST_NAME

DATASET = DatasetSpec(source="toy", image_size=32, count=6000, test_size=1000, split_seed=7)
EVAL = EvalConfig()

STAGE1_DEFAULT = Stage1Config(lam=0.05, n=1, max_iterations=20000, seed=0)
STAGE1_HARDENED = replace(STAGE1_DEFAULT, noise_std=0.5, use_aux=True, max_iterations=12000)
STAGE1_N2 = replace(STAGE1_DEFAULT, n=2, max_iterations=12000)
STAGE1_FROZEN = replace(STAGE1_DEFAULT, freeze_detector=True, max_iterations=8000)
SWEEP_ITERATIONS = 4000

GAN_PRETRAIN = GeneratorConfig(family="gan", iterations=12000, seed=0)
DDPM_PRETRAIN = GeneratorConfig(family="ddpm", iterations=12000, seed=0)
GAN_FT = Stage2Config(code=BinaryCode((1,)), family="gan", max_iterations=6000, seed=0)
DDPM_FT = Stage2Config(code=BinaryCode((1,)), family="ddpm", max_iterations=6000, seed=0)
ATTR_CODES = ("01", "10", "11")
ATTR_FT_ITERATIONS = 6000
BASELINE_ITERATIONS = 3000
ATTACK_ITERATIONS = 20000


def _exists(path: Path) -> bool:
    return (path / MANIFEST_NAME).exists()


def ensure_dataset(root: Path) -> ImageDataset:
    return ingest_dataset(DATASET)


def ensure_embedder(root: Path, ds: ImageDataset):
    path = root / "embedder"
    if _exists(path):
        return checkpoints.load_embedder(path)
    embedder = fit_feature_embedder(
        ds.train_images,
        ds.train_labels,
        width=EVAL.embedder_width,
        feature_dim=EVAL.embedder_feature_dim,
        iterations=EVAL.embedder_iterations,
        seed=0,
    )
    checkpoints.save_embedder(embedder, path, cfg_hash="pipeline", seed=0)
    return embedder


def _ensure_stage1(root: Path, name: str, cfg: Stage1Config, ds: ImageDataset, progress: bool):
    path = root / name
    if _exists(path):
        return checkpoints.load_bundle(path)
    if progress:
        print(f"[pipeline] training {name} ({cfg.max_iterations} iterations)", flush=True)
    return stage1.train_stage1(cfg, ds, run_dir=path, progress=progress)


def ensure_stage1_default(root: Path, ds: ImageDataset, progress: bool = False):
    return _ensure_stage1(root, "s1_default", STAGE1_DEFAULT, ds, progress)


def ensure_stage1_hardened(root: Path, ds: ImageDataset, progress: bool = False):
    return _ensure_stage1(root, "s1_hardened", STAGE1_HARDENED, ds, progress)


def ensure_stage1_n2(root: Path, ds: ImageDataset, progress: bool = False):
    return _ensure_stage1(root, "s1_n2", STAGE1_N2, ds, progress)


def ensure_baseline_detector(root: Path, ds: ImageDataset, progress: bool = False):
    """Conventional real-vs-generated classifier trained on one generator's samples."""
    path = root / "baseline_detector"
    if _exists(path):
        bundle = checkpoints.load_bundle(path)
        return bundle.detector
    gan = ensure_gan_pretrained(root, ds, progress=progress)
    samples = gan.sample(2000, RngState(0, "baseline-samples"))
    if progress:
        print(f"[pipeline] training baseline detector ({BASELINE_ITERATIONS} iterations)", flush=True)
    detector = evaluate.train_baseline_detector(
        ds.train_images, samples.data, iterations=BASELINE_ITERATIONS, progress=progress
    )
    # store through the bundle format for uniform loading
    from .models import CodeEmbedding, SignatureInjector

    cfg = replace(STAGE1_DEFAULT, max_iterations=0)
    bundle = checkpoints.ModelBundle(
        injector=SignatureInjector(base_width=cfg.injector_width, stages=cfg.injector_stages, embed_dim=cfg.embed_dim),
        detector=detector,
        embedding=CodeEmbedding(1, cfg.embed_dim),
        config=cfg,
        metrics={"baseline_iterations": BASELINE_ITERATIONS},
    )
    checkpoints.save_bundle(bundle, path)
    return detector


def ensure_stage1_frozen(root: Path, ds: ImageDataset, progress: bool = False):
    path = root / "s1_frozen"
    if _exists(path):
        return checkpoints.load_bundle(path)
    baseline = ensure_baseline_detector(root, ds, progress=progress)
    if progress:
        print(f"[pipeline] training s1_frozen ({STAGE1_FROZEN.max_iterations} iterations)", flush=True)
    return stage1.train_stage1(STAGE1_FROZEN, ds, run_dir=path, detector_init=baseline, progress=progress)


def ensure_gan_pretrained(root: Path, ds: ImageDataset, progress: bool = False):
    path = root / "gan_pre"
    if _exists(path):
        return generators.load_generator(path)
    if progress:
        print(f"[pipeline] pretraining gan ({GAN_PRETRAIN.iterations} iterations)", flush=True)
    adapter = generators.TinyGan(GAN_PRETRAIN)
    generators.pretrain(adapter, ds, progress=progress)
    embedder = ensure_embedder(root, ds)
    samples = adapter.sample(1000, RngState(0, "gan-fid"))
    fid = evaluate.feature_fid(ds.test_tensor(), samples, embedder)
    generators.save_generator(adapter, path, metrics={"feature_fid": fid})
    return generators.load_generator(path)


def ensure_ddpm_pretrained(root: Path, ds: ImageDataset, progress: bool = False):
    path = root / "ddpm_pre"
    if _exists(path):
        return generators.load_generator(path)
    if progress:
        print(f"[pipeline] pretraining ddpm ({DDPM_PRETRAIN.iterations} iterations)", flush=True)
    adapter = generators.TinyDdpm(DDPM_PRETRAIN)
    generators.pretrain(adapter, ds, progress=progress)
    embedder = ensure_embedder(root, ds)
    samples = adapter.sample(1000, RngState(0, "ddpm-fid"))
    fid = evaluate.feature_fid(ds.test_tensor(), samples, embedder)
    generators.save_generator(adapter, path, metrics={"feature_fid": fid})
    return generators.load_generator(path)


def ensure_finetuned(root: Path, ds: ImageDataset, family: str, progress: bool = False):
    cfg = GAN_FT if family == "gan" else DDPM_FT
    path = root / f"{family}_ft_{cfg.code}"
    if _exists(path):
        return generators.load_generator(path)
    bundle = ensure_stage1_default(root, ds, progress=progress)
    adapter = (
        ensure_gan_pretrained(root, ds, progress=progress)
        if family == "gan"
        else ensure_ddpm_pretrained(root, ds, progress=progress)
    )
    embedder = ensure_embedder(root, ds)
    signed = stage2.sign_dataset(
        bundle.injector, bundle.embedding, ds.train_images, cfg.code, bundle.injector_hash
    )
    if progress:
        print(f"[pipeline] fine-tuning {family} ({cfg.max_iterations} iterations)", flush=True)
    stage2.finetune(
        adapter, signed, cfg, bundle, run_dir=path, embedder=embedder, eval_real=ds.test_images, progress=progress
    )
    return generators.load_generator(path)


def ensure_attribution(root: Path, ds: ImageDataset, progress: bool = False) -> dict:
    path = root / "attribution"
    report_file = path / "attribution.json"
    if report_file.exists():
        with open(report_file) as fh:
            return json.load(fh)
    bundle = ensure_stage1_n2(root, ds, progress=progress)
    ensure_gan_pretrained(root, ds, progress=progress)
    configs = [
        Stage2Config(code=BinaryCode.parse(code), family="gan", max_iterations=ATTR_FT_ITERATIONS, seed=0)
        for code in ATTR_CODES
    ]
    if progress:
        print(f"[pipeline] attribution: fine-tuning {len(configs)} generators", flush=True)
    report = stage2.multi_generator_run(
        root / "gan_pre",
        configs,
        bundle,
        ds.train_images,
        ds.test_images,
        sample_count=EVAL.sample_count,
        out_dir=path,
        progress=progress,
    )
    checkpoints.write_manifest(
        path,
        kind="attribution_report",
        cfg_hash="pipeline",
        seed=0,
        files=sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file() and p.name != MANIFEST_NAME),
    )
    return report


def ensure_sweep(root: Path, ds: ImageDataset, progress: bool = False) -> list[dict]:
    path = root / "sweep"
    report_file = path / "sweep.json"
    if report_file.exists():
        with open(report_file) as fh:
            rows = json.load(fh)
        if len(rows) >= len(EVAL.sweep_lambdas) + 1:
            return rows
    embedder = ensure_embedder(root, ds)
    rows = evaluate.lambda_sweep(
        EVAL.sweep_lambdas,
        replace(STAGE1_DEFAULT, max_iterations=SWEEP_ITERATIONS),
        ds,
        run_dir=path,
        include_zero=True,
        embedder=embedder,
        iterations=SWEEP_ITERATIONS,
        progress=progress,
    )
    checkpoints.write_manifest(
        path,
        kind="sweep_report",
        cfg_hash="pipeline",
        seed=0,
        files=sorted(p.name for p in path.iterdir() if p.name != MANIFEST_NAME),
    )
    return rows


def ensure_attack(root: Path, ds: ImageDataset, setting: str, progress: bool = False) -> dict:
    """setting: 'default' or 'hardened'."""
    path = root / f"attack_{setting}.json"
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    bundle = (
        ensure_stage1_default(root, ds, progress=progress)
        if setting == "default"
        else ensure_stage1_hardened(root, ds, progress=progress)
    )
    if progress:
        print(f"[pipeline] restoration attack on {setting} ({ATTACK_ITERATIONS} iterations)", flush=True)
    report = evaluate.attack_eval(
        {setting: bundle}, ds, attack_iterations=ATTACK_ITERATIONS, progress=progress
    )
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def run_all(root: str | Path, progress: bool = True) -> dict:
    """Build every artifact behind the summary tables; resumable."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ds = ensure_dataset(root)
    ensure_embedder(root, ds)
    results = {}
    results["stage1_default"] = ensure_stage1_default(root, ds, progress).metrics
    results["sweep"] = ensure_sweep(root, ds, progress)
    results["gan_ft"] = ensure_finetuned(root, ds, "gan", progress)
    results["ddpm_ft"] = ensure_finetuned(root, ds, "ddpm", progress)
    results["attribution"] = ensure_attribution(root, ds, progress)
    results["attack_default"] = ensure_attack(root, ds, "default", progress)
    results["attack_hardened"] = ensure_attack(root, ds, "hardened", progress)
    results["stage1_frozen"] = ensure_stage1_frozen(root, ds, progress).metrics
    return results
