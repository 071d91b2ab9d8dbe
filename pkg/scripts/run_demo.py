#!/usr/bin/env python3
"""run_demo.py — Run the whole pipeline on synthetic blobs and print the headline numbers.

Usage:
    python scripts/run_demo.py                       # ProxPulse, runs/demo
    python scripts/run_demo.py --attack circuitbreaker --out runs/demo_cb
    python scripts/run_demo.py --config run_config.json
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.main import main as lab_main  # noqa: E402

STAGES = ["train", "featvis", "discover", "attack", "evaluate", "export"]


def run_demo(config: Path, out: Path, attack: str, seed: int) -> int:
    print("═" * 60)
    print(" Featvis Circuit Lab — Demo")
    print("═" * 60)
    print(f"Config: {config}   Output: {out}   Attack: {attack}\n")

    for stage in STAGES:
        argv = [stage, "--config", str(config), "--out", str(out), "--seed", str(seed), "--attack", attack]
        if stage == "export":
            argv += ["--model", "attacked"]
        print(f"─── {stage} {'─' * (50 - len(stage))}")
        code = lab_main(argv)
        if code != 0:
            print(f"❌ {stage} failed with exit code {code}")
            return code
        print(f"✅ {stage}")

    report = json.loads((out / "evaluate" / "report.json").read_text(encoding="utf-8"))
    taus = [c["kendall_tau"] for c in report["channels"] if c["kendall_tau"] is not None]
    deltas = [c["semantic_delta"] for c in report["channels"] if c["semantic_delta"] is not None]

    print("\n" + "═" * 60)
    print(" SUMMARY")
    print("═" * 60)
    print(f"  Accuracy:          {report['initial_accuracy']:.3f} -> {report['final_accuracy']:.3f}")
    if taus:
        print(f"  Mean Kendall tau:  {sum(taus) / len(taus):.3f} over {len(taus)} channels")
    if deltas:
        print(f"  Mean semantic δ:   {sum(deltas) / len(deltas):.3f}")
    for layer in report["layers"]:
        before, after = layer.get("before"), layer.get("after")
        if before and after:
            print(f"  {layer['layer']} pairwise sim: {before['mean']:.3f} -> {after['mean']:.3f}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the full featvis lab pipeline")
    parser.add_argument("--config", type=Path, default=Path("data/run_config_sample.json"))
    parser.add_argument("--out", type=Path, default=Path("runs/demo"))
    parser.add_argument("--attack", choices=("proxpulse", "circuitbreaker"), default="proxpulse")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    sys.exit(run_demo(args.config, args.out, args.attack, args.seed))
