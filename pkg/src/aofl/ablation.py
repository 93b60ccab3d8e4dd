"""Ablation grid: train every variant over several seeds and tabulate."""

from __future__ import annotations

import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import ConversationSet
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "AO-FL": {},
    "w/o AAO": {"cen_enabled": False, "are_enabled": False, "constraint": "none"},
    "w/o OPR": {"opr_enabled": False},
    "w/o CEN": {"cen_enabled": False},
    "w/o ARE": {"are_enabled": False},
    "w/o AAC": {"aac_enabled": False},
    "w/o CSR": {"csr_enabled": False},
    "-OrtNorm": {"constraint": "ort_norm"},
    "-OrtCos": {"constraint": "ort_cos"},
}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

SUMMARY_STATS = ("accuracy", "weighted_f1", "cos_phi_mean", "csr_satisfaction", "theta_std_deg",
                 "mean_abs_cos_theta", "cos_theta_std")


@dataclass
class RunResult:
    variant: str
    seed: int
    ok: bool
    seconds: float
    metrics: dict = field(default_factory=dict)
    error: str = ""

    def row(self) -> dict:
        out = {"variant": self.variant, "seed": self.seed, "ok": self.ok, "seconds": self.seconds}
        out.update({k: self.metrics.get(k, float("nan")) for k in SUMMARY_STATS})
        out["error"] = self.error
        return out


@dataclass
class AblationResult:
    runs: list[RunResult]
    variants: list[str]

    def summary(self) -> list[dict]:
        rows = []
        for name in self.variants:
            runs = [r for r in self.runs if r.variant == name]
            ok = [r for r in runs if r.ok]
            row = {"variant": name, "runs": len(runs), "failures": len(runs) - len(ok)}
            for stat in SUMMARY_STATS:
                vals = np.array([r.metrics[stat] for r in ok]) if ok else np.array([np.nan])
                row[f"{stat}_mean"] = float(vals.mean())
                row[f"{stat}_std"] = float(vals.std())
            rows.append(row)
        return rows


def _run_one(args) -> RunResult:
    name, overrides, seed, base, train_set, valid_set, test_set = args
    start = time.perf_counter()
    try:
        cfg = base.replace(seed=seed, **overrides)
        params, _ = train(cfg, train_set, valid_set)
        report = evaluate(params, test_set, cfg)
        metrics = {"accuracy": report.accuracy, "weighted_f1": report.weighted_f1, **report.angles["pooled"]}
        return RunResult(name, seed, True, time.perf_counter() - start, metrics)
    except Exception as e:  # one broken cell must not sink the grid
        log.warning("variant %s seed %d failed: %s", name, seed, e)
        return RunResult(name, seed, False, time.perf_counter() - start,
                         error=f"{type(e).__name__}: {e}".replace("\n", " "),
                         metrics={"traceback": traceback.format_exc()})


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("AOFL_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation(base: TrainConfig, train_set: ConversationSet, valid_set: ConversationSet,
                 test_set: ConversationSet, variants: dict[str, dict] | list[str] | None = None,
                 seeds=DEFAULT_SEEDS, threads: int | None = None) -> AblationResult:
    """Train and test each variant once per seed.

    ``variants`` maps names to config overrides applied on top of ``base``;
    a list selects entries of :data:`VARIANTS`. Cells run in up to
    ``threads`` worker processes (default from ``AOFL_THREADS``).
    """
    if variants is None:
        variants = VARIANTS
    elif not isinstance(variants, dict):
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; known: {list(VARIANTS)}")
        variants = {v: VARIANTS[v] for v in variants}
    for name, overrides in variants.items():
        base.replace(**overrides)  # fail fast on invalid overrides
    jobs = [(name, ov, seed, base, train_set, valid_set, test_set)
            for name, ov in variants.items() for seed in seeds]
    threads = threads or default_threads()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    return AblationResult(runs, list(variants))
