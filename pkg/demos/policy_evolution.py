"""Train through the CLI, then export how the policy moved per epoch.

    python demos/policy_evolution.py [run_dir]

Writes ``policy_evolution.csv`` with one row per (epoch, stage, op) and
prints the selection weights of stage 0 at the first and last epoch.
"""
import csv
import sys
from pathlib import Path

from hyperaug.cli import main

ROOT = Path(__file__).resolve().parents[1]
run_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/policy-demo")

if main(["train", str(ROOT / "configs" / "synth.toml"), "--output-dir", str(run_dir)]) != 0:
    sys.exit(1)
main(["export-policy", str(run_dir), "--include-initial"])

with open(run_dir / "policy_evolution.csv", newline="") as fh:
    rows = [r for r in csv.DictReader(fh) if r["stage"] == "0"]
first, last = min(int(r["epoch"]) for r in rows), max(int(r["epoch"]) for r in rows)
pi = {(int(r["epoch"]), r["op"]): float(r["pi"]) for r in rows}
print(f"{'op':<13} epoch {first:<3} epoch {last}")
for op in sorted({r["op"] for r in rows}, key=lambda o: -pi[last, o]):
    print(f"{op:<13} {pi[first, op]:.4f}    {pi[last, op]:.4f}")
