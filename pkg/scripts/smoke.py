#!/usr/bin/env python3
"""End-to-end smoke run on synthetic checkpoints.

Builds a pre-trained checkpoint and K fine-tuned checkpoints that share one
dominant direction, then runs merge, merge --svc, analyze and calibrate through
the CLI and prints what came out.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from svcmerge.checkpoint import TensorStore, compute_deltas, load_checkpoint, write_checkpoint
from svcmerge.cli import main as cli_main
from svcmerge.linalg import frobenius
from svcmerge.logs import setup_logging


# -------------------- fixtures --------------------

def build_checkpoints(root: Path, tasks: int, seed: int) -> tuple[Path, list[Path]]:
    rng = np.random.default_rng(seed)
    shapes = {"encoder.attn.weight": (24, 16), "encoder.conv.weight": (6, 4, 3), "encoder.norm.bias": (16,), "logit_scale": ()}
    pre = {k: rng.normal(size=s) for k, s in shapes.items()}
    write_checkpoint(TensorStore(pre, {"origin": "smoke"}), root / "pre.safetensors")

    shared = {k: rng.normal(scale=0.05, size=s) for k, s in shapes.items()}
    paths = []
    for t in range(tasks):
        ft = {k: pre[k] + shared[k] + rng.normal(scale=0.02, size=shapes[k]) for k in shapes}
        path = root / f"task{t}.safetensors"
        write_checkpoint(TensorStore(ft), path)
        paths.append(path)
    return root / "pre.safetensors", paths


def step(label: str, argv: list[str]) -> None:
    print(f"\n[{label}] svcmerge {' '.join(argv[:1])} …", end=" ")
    t0 = time.perf_counter()
    code = cli_main(argv)
    dt = (time.perf_counter() - t0) * 1000
    if code != 0:
        print(f"FAIL (exit {code})")
        raise SystemExit(code)
    print(f"OK ({dt:.1f} ms)")


# -------------------- main --------------------

def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--tasks", type=int, default=3, help="number of fine-tuned checkpoints")
    parser.add_argument("--seed", type=int, default=0, help="fixture seed")
    parser.add_argument("-v", "--verbose", action="store_true", help="verbose logging")
    args = parser.parse_args()

    setup_logging(args.verbose)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        pre, models = build_checkpoints(root, args.tasks, args.seed)
        common = ["--pretrained", str(pre), "--models", *map(str, models)]

        try:
            step("MERGE", ["merge", *common, "--out", str(root / "ta.safetensors")])
            step("SVC", ["merge", *common, "--svc", "--out", str(root / "svc.safetensors"),
                         "--report", str(root / "svc.json")])
            step("ANALYZE", ["analyze", *common, "--out", str(root / "gap.csv"), "--preference",
                             "--alpha-sweep", "0.25,0.5,1"])
            step("CALIBRATE", ["calibrate", *common, "--merged", str(root / "ta.safetensors"),
                               "--out", str(root / "cal.safetensors")])
        except SystemExit as exc:
            return int(exc.code or 1)

        pretrained = load_checkpoint(pre)
        ta = compute_deltas(pretrained, load_checkpoint(root / "ta.safetensors"))
        svc = compute_deltas(pretrained, load_checkpoint(root / "svc.safetensors"))
        cal = compute_deltas(pretrained, load_checkpoint(root / "cal.safetensors"))

        print("\n[RESULT] update norms (TA -> SVC):")
        for name in ta.names():
            print(f"  {name:24s} {frobenius(ta[name]):.4f} -> {frobenius(svc[name]):.4f}")

        drift = max(frobenius(svc[n] - cal[n]) for n in svc.names())
        print(f"[RESULT] merge --svc vs calibrate max drift: {drift:.3e}")

        with open(root / "gap.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        top = [r for r in rows if r["r"] == "1"]
        print("[RESULT] leading-subspace gaps:")
        for r in top:
            print(f"  {r['parameter']:24s} sigma={float(r['sigma']):.4f} gap={float(r['gap']):.4f} gamma={float(r['gamma']):.4f}")

        doc = json.loads((root / "gap.json").read_text())
        print(f"[RESULT] report schema={doc['schema']} parameters={len(doc['parameters'])} skipped={doc['skipped']}")

        if drift > 1e-9 * max(1.0, max(frobenius(svc[n]) for n in svc.names())):
            print("[EXIT] calibrate and merge --svc disagree")
            return 2

    print("\n[OK] smoke completed.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
