"""
Ablation: alignment and graph pre-training
===========================================

Runs the pipeline for the three encoder variants on the default synthetic
benchmark and prints mean Fmax and AUPR.  Stages are cached under the output
directory, so the variants share data generation and alignment.

    python demos/ablation.py [out_dir] [n_seeds]
"""

import sys

import numpy as np

from protfuse.config import RunConfig
from protfuse.pipeline import run_pipeline
from protfuse.predictor import read_metrics

out = sys.argv[1] if len(sys.argv) > 1 else "runs/ablation"
n_seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 5
seeds = ",".join(str(s) for s in range(n_seeds))

for variant in ("concat", "no_cgg", "full"):
    cfg = RunConfig().with_overrides([("run.seeds", seeds), ("eval.variant", variant)])
    rows = read_metrics(run_pipeline(cfg, out))
    f = np.mean([v for m, v, _ in rows if m == "fmax"])
    a = np.mean([v for m, v, _ in rows if m == "aupr"])
    print(f"{variant:7s} Fmax {f:.4f}  AUPR {a:.4f}")
