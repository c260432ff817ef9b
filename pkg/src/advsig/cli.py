"""Experiment runner: subcommands tying ingestion, training, and evaluation together.

Every subcommand consumes a JSON config (plus ``--override key=value`` dotted
paths), writes its artifacts under one output root, and stamps them with
manifests; ``report`` aggregates everything into a single summary.

Exit codes: 0 success, 1 user error (bad config, missing upstream artifact,
overwrite refusal), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoints, data, evaluate, generators, stage1, stage2
from .config import (
    ExperimentConfig,
    apply_override,
    config_hash,
    load_config,
    save_config,
    to_dict,
)
from .core import CoreError, ImageTensor, RngState, sample_code_batch
from .models import fit_feature_embedder, inject_batch, rotation_labels

DEFAULT_ROOT_ENV = "ADVSIG_OUT"


class UserError(CoreError):
    pass


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get(DEFAULT_ROOT_ENV)
    if env:
        return Path(env)
    return Path("advsig_out")


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.override or []:
        if "=" not in item:
            raise UserError(f"--override expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg = apply_override(cfg, key, value)
    if args.seed is not None:
        d = to_dict(cfg)
        d["seed"] = args.seed
        d["stage1"]["seed"] = args.seed
        from .config import from_dict

        cfg = from_dict(d)
    return cfg


def _refuse_overwrite(path: Path, force: bool, what: str) -> None:
    if (path / checkpoints.MANIFEST_NAME).exists() and not force:
        raise UserError(f"{what} already exists at {path}; pass --force to overwrite")


def _require(path: Path, what: str, producer: str) -> None:
    if not (path / checkpoints.MANIFEST_NAME).exists():
        raise UserError(f"missing {what} at {path}; run the `{producer}` subcommand first")


def stage1_dir(root: Path, cfg: ExperimentConfig) -> Path:
    return root / "stage1" / f"s1_{config_hash(cfg.stage1)[:10]}"


def signed_dir(root: Path, code) -> Path:
    return root / "signed" / str(code)


def gen_dir(root: Path, family: str, suffix: str = "pre") -> Path:
    return root / "gen" / f"{family}_{suffix}"


def _ingest(cfg: ExperimentConfig, root: Path) -> data.ImageDataset:
    ds = data.ingest_dataset(cfg.dataset)
    dataset_dir = root / "dataset"
    if not (dataset_dir / checkpoints.MANIFEST_NAME).exists():
        dataset_dir.mkdir(parents=True, exist_ok=True)
        manifest = dict(ds.manifest)
        with open(dataset_dir / checkpoints.MANIFEST_NAME, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ds


def ensure_embedder(cfg: ExperimentConfig, root: Path, ds: data.ImageDataset):
    emb_dir = root / "embedder"
    if (emb_dir / checkpoints.MANIFEST_NAME).exists():
        return checkpoints.load_embedder(emb_dir)
    images, labels = ds.train_images, ds.train_labels
    if labels is None:
        gen = RngState(cfg.seed, "embedder-rotations").torch
        images, labels = rotation_labels(images, gen)
    embedder = fit_feature_embedder(
        images,
        labels,
        width=cfg.eval.embedder_width,
        feature_dim=cfg.eval.embedder_feature_dim,
        iterations=cfg.eval.embedder_iterations,
        seed=cfg.seed,
    )
    checkpoints.save_embedder(embedder, emb_dir, cfg_hash=cfg.hash, seed=cfg.seed)
    return embedder


# ---------------------------------------------------------------------------
# Subcommands

def cmd_ingest(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    out = root / "dataset_tree"
    _refuse_overwrite(out, args.force, "materialized dataset")
    ds = data.ingest_dataset(cfg.dataset, out_dir=out)
    print(f"ingested {len(ds.train_hashes)} train / {len(ds.test_hashes)} test images -> {out}")
    if ds.skipped:
        print(f"skipped {len(ds.skipped)} unreadable files")
    return 0


def cmd_train_injector(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    run_dir = stage1_dir(root, cfg)
    _refuse_overwrite(run_dir, args.force, "stage-1 checkpoint")
    ds = _ingest(cfg, root)
    save_config(cfg, root / "config.json") if not (root / "config.json").exists() else None
    print(f"training injector/detector for {cfg.stage1.max_iterations} iterations -> {run_dir}")
    bundle = stage1.train_stage1(cfg.stage1, ds, run_dir=run_dir, progress=True)
    print(f"holdout accuracy={bundle.metrics['holdout_accuracy']:.3f} psnr={bundle.metrics['holdout_psnr']:.2f} dB")
    return 0


def cmd_sign_dataset(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    s1 = stage1_dir(root, cfg)
    _require(s1, "stage-1 checkpoint", "train-injector")
    bundle = checkpoints.load_bundle(s1)
    ds = _ingest(cfg, root)
    for s2 in cfg.stage2:
        out = signed_dir(root, s2.code)
        _refuse_overwrite(out, args.force, f"signed dataset {s2.code}")
        signed = stage2.sign_dataset(
            bundle.injector,
            bundle.embedding,
            ds.train_images,
            s2.code,
            bundle.injector_hash,
            out_dir=out,
            cfg_hash=cfg.hash,
            parents=[bundle.injector_hash],
        )
        print(f"signed {signed.images.shape[0]} images with code {s2.code}; mean psnr {signed.manifest['psnr_mean']:.2f} dB")
    return 0


def cmd_pretrain_gen(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    ds = _ingest(cfg, root)
    embedder = ensure_embedder(cfg, root, ds)
    for gcfg in cfg.pretrain:
        out = gen_dir(root, gcfg.family)
        _refuse_overwrite(out, args.force, f"pretrained {gcfg.family}")
        adapter = generators.make_adapter(gcfg)
        print(f"pretraining {gcfg.family} for {gcfg.iterations} iterations -> {out}")
        generators.pretrain(adapter, ds, run_dir=None, progress=True)
        samples = adapter.sample(
            max(cfg.eval.sample_count, 2 * embedder.feature_dim), RngState(gcfg.seed, f"{gcfg.family}-fid")
        )
        fid = evaluate.feature_fid(ds.test_tensor(), samples, embedder)
        generators.save_generator(adapter, out, metrics={"feature_fid": fid})
        print(f"{gcfg.family} feature-FID vs real test set: {fid:.2f}")
    return 0


def cmd_finetune_gen(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    s1 = stage1_dir(root, cfg)
    _require(s1, "stage-1 checkpoint", "train-injector")
    bundle = checkpoints.load_bundle(s1)
    ds = _ingest(cfg, root)
    embedder = ensure_embedder(cfg, root, ds)
    for s2 in cfg.stage2:
        pre = gen_dir(root, s2.family)
        _require(pre, f"pretrained {s2.family}", "pretrain-gen")
        sdir = signed_dir(root, s2.code)
        _require(sdir, f"signed dataset {s2.code}", "sign-dataset")
        out = gen_dir(root, s2.family, f"ft_{s2.code}")
        _refuse_overwrite(out, args.force, f"fine-tuned {s2.family} ({s2.code})")
        signed_manifest = checkpoints.read_manifest(sdir)
        signed_images = torch.cat(
            [data.load_image_png(p).data for p in sorted(sdir.glob("signed_*.png"))], dim=0
        )
        signed = stage2.SignedDataset(images=signed_images, code=s2.code, manifest=signed_manifest)
        adapter = generators.load_generator(pre)
        print(f"fine-tuning {s2.family} on code {s2.code} for {s2.max_iterations} iterations -> {out}")
        stage2.finetune(
            adapter, signed, s2, bundle, run_dir=out, embedder=embedder, eval_real=ds.test_images, progress=True
        )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    s1 = stage1_dir(root, cfg)
    _require(s1, "stage-1 checkpoint", "train-injector")
    bundle = checkpoints.load_bundle(s1)
    ds = _ingest(cfg, root)
    embedder = ensure_embedder(cfg, root, ds)
    reports_dir = root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    test = ds.test_tensor()
    codes = sample_code_batch(bundle.config.n, RngState(cfg.seed, "eval-codes"), test.batch_size)
    with torch.no_grad():
        signed = ImageTensor(inject_batch(bundle.injector, bundle.embedding, test.data, codes), quantized=True)
    report = evaluate.eval_detector(
        bundle.detector,
        test,
        signed,
        threshold=cfg.eval.threshold,
        gen_codes=codes,
        paired=True,
        train_hashes=set(ds.train_hashes),
        cfg_hash=cfg.hash,
        checkpoint_hashes={"injector": bundle.injector_hash, "detector": bundle.detector_hash},
    )
    report.feature_fid = evaluate.feature_fid(test, signed, embedder)
    files = ["stage1_eval.json", "stage1_roc.csv"]
    with open(reports_dir / "stage1_eval.json", "w") as fh:
        fh.write(report.to_json())
    curve = evaluate.roc_auc(
        evaluate.detector_scores(bundle.detector, test).tolist(),
        evaluate.detector_scores(bundle.detector, signed).tolist(),
    )
    evaluate.roc_points_csv(curve, reports_dir / "stage1_roc.csv")
    print(f"stage-1: accuracy={report.accuracy:.3f} auc={report.auc:.4f} psnr={report.psnr_mean:.2f} dB")

    gen_rows = []
    for s2 in cfg.stage2:
        ft = gen_dir(root, s2.family, f"ft_{s2.code}")
        if not (ft / checkpoints.MANIFEST_NAME).exists():
            continue
        adapter = generators.load_generator(ft)
        samples = adapter.sample(cfg.eval.sample_count, RngState(s2.seed, f"eval-{s2.family}-{s2.code}"))
        row = {
            "family": s2.family,
            "code": str(s2.code),
            "accuracy": evaluate.balanced_accuracy(bundle.detector, test, samples, cfg.eval.threshold),
            "detection_rate": evaluate.detection_rate(bundle.detector, samples, cfg.eval.threshold),
            "feature_fid": evaluate.feature_fid(test, samples, embedder),
            "robustness": evaluate.robustness_table(bundle.detector, samples, cfg.eval.threshold),
        }
        if bundle.config.n > 1:
            row["exact_match"] = stage2.exact_match_rate(bundle.detector, samples, s2.code, cfg.eval.threshold)
        gen_rows.append(row)
    if gen_rows:
        with open(reports_dir / "generators_eval.json", "w") as fh:
            json.dump(gen_rows, fh, indent=2, sort_keys=True)
        files.append("generators_eval.json")
        for row in gen_rows:
            print(f"{row['family']}({row['code']}): acc={row['accuracy']:.3f} fid={row['feature_fid']:.2f}")

    checkpoints.write_manifest(
        reports_dir, kind="report", cfg_hash=cfg.hash, seed=cfg.seed, files=sorted(set(files)),
        parents=[bundle.injector_hash],
    )
    return 0


def cmd_attack(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    s1 = stage1_dir(root, cfg)
    _require(s1, "stage-1 checkpoint", "train-injector")
    bundle = checkpoints.load_bundle(s1)
    ds = _ingest(cfg, root)
    setting = f"noise{bundle.config.noise_std:g}_aux{int(bundle.config.use_aux)}"
    print(f"training restoration attacker for {cfg.eval.attack_iterations} iterations (setting {setting})")
    report = evaluate.attack_eval(
        {setting: bundle}, ds, attack_iterations=cfg.eval.attack_iterations, threshold=cfg.eval.threshold,
        progress=True,
    )
    out = root / "attack"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attack.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    checkpoints.write_manifest(out, kind="attack_report", cfg_hash=cfg.hash, seed=cfg.seed, files=["attack.json"])
    row = report["settings"][setting]
    print(
        f"psnr={row['psnr']:.2f} acc(signed)={row['accuracy_signed']:.3f} acc(restored)={row['accuracy_restored']:.3f}"
    )
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    ds = _ingest(cfg, root)
    embedder = ensure_embedder(cfg, root, ds)
    out = root / "sweep"
    _refuse_overwrite(out, args.force, "lambda sweep")
    rows = evaluate.lambda_sweep(
        cfg.eval.sweep_lambdas,
        cfg.stage1,
        ds,
        run_dir=out,
        include_zero=cfg.eval.sweep_include_zero,
        embedder=embedder,
        iterations=cfg.eval.sweep_iterations,
        threshold=cfg.eval.threshold,
        progress=True,
    )
    files = sorted(p.name for p in out.iterdir() if p.name != checkpoints.MANIFEST_NAME)
    checkpoints.write_manifest(out, kind="sweep_report", cfg_hash=cfg.hash, seed=cfg.seed, files=files)
    for row in rows:
        fid = f"{row['feature_fid']:.2f}" if row["feature_fid"] is not None else "-"
        print(f"lam={row['lam']:<8g} psnr={row['psnr']:.2f} acc={row['accuracy']:.3f} fid={fid}")
    return 0


def integrity_check(root: Path) -> list[str]:
    """Every artifact file must be listed by its nearest ancestor manifest.

    Files directly in the output root (config.json, summary.*) are exempt.
    """
    manifest_dirs = {p.parent for p in root.rglob(checkpoints.MANIFEST_NAME)}
    listed_cache: dict[Path, set[str]] = {}

    def listed(directory: Path) -> set[str]:
        if directory not in listed_cache:
            with open(directory / checkpoints.MANIFEST_NAME) as fh:
                listed_cache[directory] = set(json.load(fh).get("files", []))
        return listed_cache[directory]

    orphans = []
    for path in root.rglob("*"):
        if path.is_dir() or path.name == checkpoints.MANIFEST_NAME:
            continue
        owner = None
        for anc in [path.parent, *path.parent.parents]:
            if anc in manifest_dirs:
                owner = anc
                break
            if anc == root:
                break
        if owner is None:
            if path.parent != root:
                orphans.append(str(path.relative_to(root)))
            continue
        if str(path.relative_to(owner)) not in listed(owner):
            orphans.append(str(path.relative_to(root)))
    return orphans


def cmd_report(args) -> int:
    cfg = _load_experiment(args)
    root = _out_root(args)
    if not root.exists():
        raise UserError(f"output root {root} does not exist; nothing to report")
    summary: dict = {"config_hash": cfg.hash, "stage1": [], "generators": [], "sweep": None, "attack": None}
    for manifest_path in sorted(root.rglob(checkpoints.MANIFEST_NAME)):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        kind = manifest.get("kind")
        entry = {"path": str(manifest_path.parent.relative_to(root)), "metrics": manifest.get("metrics", {})}
        if kind == "stage1_bundle":
            entry["stage1_config"] = {
                k: manifest.get("stage1_config", {}).get(k)
                for k in ("lam", "n", "noise_std", "use_aux", "max_iterations", "freeze_detector")
            }
            summary["stage1"].append(entry)
        elif kind == "generator":
            entry["family"] = manifest.get("family")
            entry["step"] = manifest.get("step")
            summary["generators"].append(entry)
    sweep_file = root / "sweep" / "sweep.json"
    if sweep_file.exists():
        with open(sweep_file) as fh:
            summary["sweep"] = json.load(fh)
    attack_file = root / "attack" / "attack.json"
    if attack_file.exists():
        with open(attack_file) as fh:
            summary["attack"] = json.load(fh)
    for extra in ("stage1_eval", "generators_eval"):
        p = root / "reports" / f"{extra}.json"
        if p.exists():
            with open(p) as fh:
                summary[extra] = json.load(fh)
    orphans = integrity_check(root)
    summary["orphans"] = orphans

    out_json = root / "summary.json"
    with open(out_json, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    out_md = root / "summary.md"
    with open(out_md, "w") as fh:
        fh.write(render_summary_markdown(summary))
    print(f"wrote {out_json} and {out_md}")
    if orphans:
        print(f"integrity check FAILED: {len(orphans)} orphan files", file=sys.stderr)
        return 1
    return 0


def render_summary_markdown(summary: dict) -> str:
    lines = ["# Run summary", ""]
    if summary["stage1"]:
        lines += ["## Stage 1 checkpoints", "", "| run | lam | n | noise | aux | accuracy | psnr |", "|---|---|---|---|---|---|---|"]
        for e in summary["stage1"]:
            c = e.get("stage1_config", {})
            m = e.get("metrics", {})
            lines.append(
                f"| {e['path']} | {c.get('lam')} | {c.get('n')} | {c.get('noise_std')} | {c.get('use_aux')} "
                f"| {m.get('holdout_accuracy', float('nan')):.3f} | {m.get('holdout_psnr', float('nan')):.2f} |"
            )
        lines.append("")
    if summary.get("sweep"):
        lines += ["## Balance sweep", "", "| lam | psnr | accuracy | feature_fid |", "|---|---|---|---|"]
        for row in summary["sweep"]:
            fid = f"{row['feature_fid']:.2f}" if row.get("feature_fid") is not None else "-"
            lines.append(f"| {row['lam']:g} | {row['psnr']:.2f} | {row['accuracy']:.3f} | {fid} |")
        lines.append("")
    if summary.get("attack"):
        lines += ["## Restoration attack", "", "| setting | psnr | acc(signed) | acc(restored) |", "|---|---|---|---|"]
        for name, row in summary["attack"]["settings"].items():
            lines.append(
                f"| {name} | {row['psnr']:.2f} | {row['accuracy_signed']:.3f} | {row['accuracy_restored']:.3f} |"
            )
        lines.append("")
    if summary.get("generators_eval"):
        lines += ["## Secured generators", "", "| family | code | accuracy | feature_fid | blur | hflip | rotation |", "|---|---|---|---|---|---|---|"]
        for row in summary["generators_eval"]:
            r = row.get("robustness", {})
            lines.append(
                f"| {row['family']} | {row['code']} | {row['accuracy']:.3f} | {row['feature_fid']:.2f} "
                f"| {r.get('gaussian_blur', float('nan')):.3f} | {r.get('hflip', float('nan')):.3f} | {r.get('rotation', float('nan')):.3f} |"
            )
        lines.append("")
    if summary.get("orphans"):
        lines += ["## Integrity", "", f"{len(summary['orphans'])} orphan files:", ""]
        lines += [f"- {o}" for o in summary["orphans"]]
        lines.append("")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advsig", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "ingest": cmd_ingest,
        "train-injector": cmd_train_injector,
        "sign-dataset": cmd_sign_dataset,
        "pretrain-gen": cmd_pretrain_gen,
        "finetune-gen": cmd_finetune_gen,
        "evaluate": cmd_evaluate,
        "attack": cmd_attack,
        "sweep-lambda": cmd_sweep_lambda,
        "report": cmd_report,
    }
    for name, func in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        p.add_argument("--out", type=str, default=None, help=f"output root (default ${DEFAULT_ROOT_ENV} or ./advsig_out)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
