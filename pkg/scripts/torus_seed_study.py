"""Seed spread of the torus error for both formulations and every constant fix.

Usage: python3 scripts/torus_seed_study.py [n_seeds]
"""
import sys

import numpy as np

from surfrann.experiments import TorusConfig, run_torus

n = int(sys.argv[1]) if len(sys.argv) > 1 else 5
for mode, N in (("global_ansatz", 2500), ("penalized", 4900)):
    for fix in ("reference_point", "mean_zero"):
        cfg = TorusConfig(mode=mode, M=(1000,), N=(N,), seeds=tuple(range(n)), constant_fix=fix)
        errs = [r["error"] for r in run_torus(cfg).rows]
        print(f"{mode:14s} N={N} {fix:16s} median {np.median(errs):.3e}  range [{min(errs):.2e}, {max(errs):.2e}]")
