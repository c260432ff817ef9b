#!/usr/bin/env python3
"""Build every experiment artifact (stage-1 runs, sweeps, generators, attacks).

Resumable: re-running skips artifacts that already exist under the root.

    python3 scripts/run_all.py [--root artifacts/acceptance] [--only NAME ...]
"""

import argparse
import os
import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from advsig import pipeline


STEPS = {
    "dataset": lambda root, ds: None,
    "embedder": lambda root, ds: pipeline.ensure_embedder(root, ds),
    "s1_default": lambda root, ds: pipeline.ensure_stage1_default(root, ds, progress=True),
    "s1_hardened": lambda root, ds: pipeline.ensure_stage1_hardened(root, ds, progress=True),
    "s1_n2": lambda root, ds: pipeline.ensure_stage1_n2(root, ds, progress=True),
    "s1_frozen": lambda root, ds: pipeline.ensure_stage1_frozen(root, ds, progress=True),
    "gan_pre": lambda root, ds: pipeline.ensure_gan_pretrained(root, ds, progress=True),
    "ddpm_pre": lambda root, ds: pipeline.ensure_ddpm_pretrained(root, ds, progress=True),
    "gan_ft": lambda root, ds: pipeline.ensure_finetuned(root, ds, "gan", progress=True),
    "ddpm_ft": lambda root, ds: pipeline.ensure_finetuned(root, ds, "ddpm", progress=True),
    "attribution": lambda root, ds: pipeline.ensure_attribution(root, ds, progress=True),
    "sweep": lambda root, ds: pipeline.ensure_sweep(root, ds, progress=True),
    "attack_default": lambda root, ds: pipeline.ensure_attack(root, ds, "default", progress=True),
    "attack_hardened": lambda root, ds: pipeline.ensure_attack(root, ds, "hardened", progress=True),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default=os.environ.get("ADVSIG_ACCEPT_DIR", "artifacts/acceptance"))
    parser.add_argument("--only", nargs="*", choices=sorted(STEPS), default=None)
    args = parser.parse_args()

    torch.set_num_threads(max(1, os.cpu_count() or 1))
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    ds = pipeline.ensure_dataset(root)
    names = args.only or list(STEPS)
    for name in names:
        t0 = time.perf_counter()
        print(f"=== {name} ===", flush=True)
        STEPS[name](root, ds)
        print(f"=== {name} done in {time.perf_counter() - t0:.0f}s ===", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
