"""Desk-scale ablation matrix and tau sweep over a fixed seed set."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .config import RunConfig
from .experiment import build_split, run_cell

log = logging.getLogger("sss.benchmark")

SEEDS = (0, 1, 2)
TAUS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

# name -> overrides; the ablation matrix is pure config
VARIANTS = {
    "supervised": {"trainer.unlabeled_batch": 0, "model.use_dfe": False, "pcsw.enabled": False},
    "baseline": {"model.use_dfe": False, "pcsw.enabled": False},
    "baseline+dfe": {"model.use_dfe": True, "pcsw.enabled": False},
    "baseline+pcsw": {"model.use_dfe": False, "pcsw.enabled": True},
    "full": {"model.use_dfe": True, "pcsw.enabled": True},
}


class CellRunner:
    """Runs cells once; results are memoised by config hash (optionally on disk)."""

    def __init__(self, base: RunConfig, cache_dir=None):
        self.base = base
        self.split = build_split(base)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.results: dict[str, dict] = {}

    def dice(self, cfg: RunConfig) -> float:
        h = cfg.hash()
        if h not in self.results:
            path = self.cache_dir / f"{h}.json" if self.cache_dir else None
            if path is not None and path.exists():
                self.results[h] = json.loads(path.read_text())
            else:
                res = run_cell(cfg, self.split)
                res.pop("records")
                self.results[h] = res
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(json.dumps(res, sort_keys=True))
            log.info("cell %s seed %d tau %.2f dfe %s pcsw %s -> dice %.2f", h, cfg["run.seed"],
                     cfg["pcsw.tau"], cfg["model.use_dfe"], cfg["pcsw.enabled"],
                     self.results[h]["summary"]["mean"]["dice"])
        return self.results[h]["summary"]["mean"]["dice"]


def ablation(runner: CellRunner, seeds=SEEDS) -> dict[str, dict]:
    out = {}
    for name, over in VARIANTS.items():
        per_seed = [runner.dice(runner.base.replace(**over, **{"run.seed": s})) for s in seeds]
        out[name] = {"per_seed": per_seed, "mean": float(np.mean(per_seed))}
    return out


def tau_sweep(runner: CellRunner, taus=TAUS, seeds=SEEDS) -> dict[float, dict]:
    out = {}
    full = VARIANTS["full"]
    for tau in taus:
        per_seed = [runner.dice(runner.base.replace(**full, **{"run.seed": s, "pcsw.tau": tau}))
                    for s in seeds]
        out[tau] = {"per_seed": per_seed, "mean": float(np.mean(per_seed))}
    return out
