#!/usr/bin/env python3
"""Measure how each corruption severity degrades a frozen model's AbsRel.

Trains a baseline on a synthetic dataset, evaluates the full corruption grid,
and prints the AbsRel ratio against the clean score for every (kind, severity)
cell. The shipped severity tables were chosen so that severity 3 lands near a
2x ratio for a converged baseline; rerun this after touching the tables or the
corruption kernels to see where the grid actually sits.
"""

import argparse
import csv
import subprocess
import sys
import tempfile
from pathlib import Path

CONFIG = """\
epochs = {epochs}
batch_size = 2
seed = {seed}
lr_theta = {lr_theta}
smoothness_weight = 0.05
enable_ada = false
enable_cgs = false
"""


def run(binary, *args):
    cmd = [str(binary), *map(str, args)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        sys.stderr.write(proc.stderr)
        sys.exit(f"command failed ({proc.returncode}): {' '.join(cmd)}")
    return proc.stdout


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bin", default="build/scat", help="scat CLI binary")
    ap.add_argument("--work", default=None, help="work dir (default: temp dir)")
    ap.add_argument("--scenes", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--lr-theta", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    binary = Path(args.bin).resolve()
    if not binary.exists():
        sys.exit(f"no such binary: {binary}")
    work = Path(args.work) if args.work else Path(tempfile.mkdtemp(prefix="scat_calib_"))
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    model = work / "model"

    print(f"work dir: {work}")
    if not (data / "manifest.txt").exists():
        run(binary, "gen-data", "--out", data, "--scenes", args.scenes,
            "--seed", args.seed, "--force")
    cfg = work / "train.cfg"
    cfg.write_text(CONFIG.format(epochs=args.epochs, seed=args.seed,
                                 lr_theta=args.lr_theta))
    run(binary, "train", "--config", cfg, "--data", data, "--out", model)
    run(binary, "eval", "--checkpoint", model / "checkpoint_final.ckpt",
        "--data", data, "--corrupt", "all", "--out", work / "grid.csv")

    rows = list(csv.DictReader(open(work / "grid.csv")))
    clean = next(float(r["abs_rel"]) for r in rows if r["corruption"] == "clean")
    print(f"clean abs_rel: {clean:.4f}\n")
    print(f"{'kind':<16}{'sev':>4}{'abs_rel':>10}{'ratio':>8}")
    for r in rows:
        if r["corruption"] in ("clean", "mce", "mrr"):
            continue
        ratio = float(r["abs_rel"]) / clean
        print(f"{r['corruption']:<16}{r['severity']:>4}"
              f"{float(r['abs_rel']):>10.4f}{ratio:>8.3f}")


if __name__ == "__main__":
    main()
