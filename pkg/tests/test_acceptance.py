"""End-to-end acceptance checks.

Each criterion records one PASS/FAIL line (printed in the pytest terminal
summary) and asserts at its pinned tolerance. Run alone with
``pytest tests/test_acceptance.py -v``. The full ablation grid dominates the
runtime (about 20 minutes on one core).
"""

import math
import time

import numpy as np
import pytest

from aofl import ablation, dataio, losses as L
from aofl import tensor as T
from aofl import train as TR
from aofl.model import MODALITIES, ModelDims, ModelParams, forward
from aofl.tensor import Tensor
from oracles import cen_bruteforce, ort_norm_bruteforce, weighted_f1_bruteforce

# pinned tolerances and budgets
GRAD_REL_TOL = 1e-4
GRAD_STEP = 1e-5
GRAD_SEEDS = 20
GRAD_BUDGET_S = 60.0
GRAD_ENTRIES_PER_TENSOR = 3
HINGE_MARGIN = 1e-3
ORACLE_TOL = 1e-10
ORACLE_TRIALS = 100
FIXTURE_TOL = 5e-9  # the fixtures are quoted to 8 decimals
WF1_FIXTURE_TOL = 5e-6  # quoted to 5 decimals
E2E_MIN_ACCURACY = 0.95
E2E_MAX_EPOCHS = 200
E2E_BUDGET_S = 300.0
GEOM_SEEDS = (0, 1, 2, 3, 4)
MIN_COS_PHI = 0.8
MIN_CSR_RATE = 0.90
MIN_THETA_STD_DEG = 5.0
ORT_COS_WEIGHT = 1.0
MAX_ORT_ABS_COS = 0.15
MIN_AAO_COS_STD = 0.05
GRID_BUDGET_S = 45 * 60.0

RESULTS: dict[str, str] = {}


def record(key: str, ok: bool, detail: str) -> None:
    RESULTS[key] = f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}"


@pytest.fixture(scope="module")
def default_splits():
    ds = dataio.synth_generate(dataio.SynthSpec())
    return dataio.split(ds, TR.TrainConfig().split_ratios, seed=TR.TrainConfig().seed)


@pytest.fixture(scope="module")
def grid(default_splits, tmp_path_factory):
    start = time.perf_counter()
    result = ablation.run_ablation(TR.TrainConfig(), *default_splits, seeds=GEOM_SEEDS)
    seconds = time.perf_counter() - start
    out = tmp_path_factory.mktemp("grid")
    summary = result.summary()
    TR.write_csv(out / "ablation_summary.csv", summary)
    table = TR.format_table(summary, ["variant", "runs", "failures", "accuracy_mean", "accuracy_std",
                                      "weighted_f1_mean", "weighted_f1_std", "cos_phi_mean_mean",
                                      "csr_satisfaction_mean", "theta_std_deg_mean", "mean_abs_cos_theta_mean",
                                      "cos_theta_std_mean"])
    (out / "ablation_summary.txt").write_text(table)
    RESULTS["~table"] = "ablation grid, mean over seeds:\n" + table
    return result, seconds, out


def aofl_runs(grid):
    result = grid[0]
    runs = [r for r in result.runs if r.variant == "AO-FL"]
    assert all(r.ok for r in runs), [r.error for r in runs]
    return runs


# ---------------------------------------------------------------------------
# 1. gradients through the full model
# ---------------------------------------------------------------------------

def gradient_case(seed):
    """3-utterance batch with d=8; resampled until every hinge input clears the kink."""
    dims = ModelDims(d=8, num_classes=3, num_layers=2, num_heads=4)
    rng = np.random.default_rng([seed, 99])
    for _ in range(100):
        params = ModelParams.init(dims, seed=int(rng.integers(2**31)))
        X = [rng.normal(size=(3, 8)) for _ in MODALITIES]
        labels = np.array([0, 1, int(rng.integers(0, 3))])
        with T.no_grad():
            b = forward(*X, params)
            gap = np.concatenate([(b.cos_phi_mean(m) - b.cos_theta[m]).data for m in MODALITIES])
        if np.abs(gap).min() > HINGE_MARGIN:
            return params, X, labels
    raise RuntimeError("no kink-free draw")


def all_losses(params, X, labels):
    b = forward(*X, params)
    cos_t = [b.cos_theta[m] for m in MODALITIES]
    out = {
        "cen_raw": L.cen_loss(b.g, labels, normalize=False),
        "cen_norm": L.cen_loss(b.g, labels, normalize=True),
        "aac": L.aac_loss(cos_t, [b.cos_theta_hat[m] for m in MODALITIES]),
        "csr": L.csr_loss([b.cos_phi_mean(m) for m in MODALITIES], cos_t),
        "ce": L.cross_entropy(b.logits, labels),
        "ort_norm": L.ortho_baseline_loss("ort_norm", b.g, b.h),
        "ort_cos": L.ortho_baseline_loss("ort_cos", b.g, b.h),
    }
    w = L.LossWeights()
    out["total"] = L.total_loss(out["cen_norm"], L.are_loss(out["aac"], out["csr"], w.gamma, w.mu), out["ce"], w)
    return out


def test_c1_gradient_correctness():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(GRAD_SEEDS):
        params, X, labels = gradient_case(seed)
        errs = T.grad_check_many(lambda: all_losses(params, X, labels), list(params), step=GRAD_STEP,
                                 max_entries=GRAD_ENTRIES_PER_TENSOR, seed=seed)
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    seconds = time.perf_counter() - start
    top = max(worst.values())
    ok = top < GRAD_REL_TOL and seconds < GRAD_BUDGET_S and len(worst) == 8
    record("1", ok, f"max rel err {top:.2e} (< {GRAD_REL_TOL:g}) over {len(worst)} losses x {GRAD_SEEDS} seeds, "
                    f"{seconds:.1f}s (< {GRAD_BUDGET_S:g}s)")
    assert ok, worst


# ---------------------------------------------------------------------------
# 2. brute-force oracles
# ---------------------------------------------------------------------------

def test_c2_loss_oracles():
    rng = np.random.default_rng(2024)
    worst = {"cen": 0.0, "wf1": 0.0, "ort_norm": 0.0}
    for _ in range(ORACLE_TRIALS):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        g = {m: rng.normal(size=(n, d)) for m in MODALITIES}
        y = rng.integers(0, 3, size=n).tolist()
        got = L.cen_loss({m: Tensor(v) for m, v in g.items()}, y, normalize=False).item()
        worst["cen"] = max(worst["cen"], abs(got - cen_bruteforce({m: v.tolist() for m, v in g.items()}, y)))

        k = int(rng.integers(2, 6))
        cm = rng.integers(0, 21, size=(k, k))
        cm[rng.integers(k), rng.integers(k)] += 1
        worst["wf1"] = max(worst["wf1"], abs(TR.weighted_f1(cm) - weighted_f1_bruteforce(cm.tolist())[0]))

        G = {m: rng.normal(size=(n, d)) for m in MODALITIES}
        H = {m: rng.normal(size=(n, d)) for m in MODALITIES}
        got = L.ortho_baseline_loss("ort_norm", {m: Tensor(v) for m, v in G.items()},
                                    {m: Tensor(v) for m, v in H.items()}).item()
        ref = ort_norm_bruteforce({m: v.tolist() for m, v in G.items()}, {m: v.tolist() for m, v in H.items()})
        worst["ort_norm"] = max(worst["ort_norm"], abs(got - ref))
    ok = max(worst.values()) < ORACLE_TOL
    record("2", ok, ", ".join(f"{k} max |diff| {v:.1e}" for k, v in worst.items())
           + f" over {ORACLE_TRIALS} instances (< {ORACLE_TOL:g})")
    assert ok, worst


# ---------------------------------------------------------------------------
# 3. worked-value fixtures
# ---------------------------------------------------------------------------

def test_c3_worked_fixtures():
    cen = L.cen_term(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), [Tensor([[0.0, 1.0]])]).item()
    aac = L.aac_loss(Tensor([[1.0], [0.0]]), Tensor([[0.0], [0.0]])).item()
    csr = L.csr_loss(Tensor([[0.9]]), Tensor([[0.5]])).item()
    wf1 = TR.weighted_f1([[5, 1], [2, 4]])
    checks = {
        "cen": (cen, 0.31326169, FIXTURE_TOL),
        "aac": (aac, math.sqrt(0.5), 1e-15),
        "csr": (csr, 0.4, 1e-15),
        "wf1": (wf1, 0.74825, WF1_FIXTURE_TOL),
    }
    ok = all(abs(v - ref) <= tol for v, ref, tol in checks.values())
    record("3", ok, ", ".join(f"{k}={v:.8f}" for k, (v, _, _) in checks.items()))
    assert ok, checks


# ---------------------------------------------------------------------------
# 4. synthetic end-to-end
# ---------------------------------------------------------------------------

def test_c4_synthetic_end_to_end(default_splits):
    tr, va, te = default_splits
    cfg = TR.TrainConfig()
    start = time.perf_counter()
    params, hist = TR.train(cfg, tr, va)
    rep = TR.evaluate(params, te, cfg)
    seconds = time.perf_counter() - start
    ok = rep.accuracy >= E2E_MIN_ACCURACY and cfg.epochs <= E2E_MAX_EPOCHS and seconds < E2E_BUDGET_S
    record("4", ok, f"test accuracy {rep.accuracy:.4f} (>= {E2E_MIN_ACCURACY}) after {cfg.epochs} epochs, "
                    f"{seconds:.1f}s (< {E2E_BUDGET_S:g}s)")
    assert ok


# ---------------------------------------------------------------------------
# 5. geometry after training, averaged over seeds
# ---------------------------------------------------------------------------

def geometry(grid):
    runs = aofl_runs(grid)
    mean = lambda k: float(np.mean([r.metrics[k] for r in runs]))  # noqa: E731
    return {"cos_phi": mean("cos_phi_mean"), "csr": mean("csr_satisfaction"), "theta_std": mean("theta_std_deg"),
            "cos_std": mean("cos_theta_std")}


def record_c5(grid):
    g = geometry(grid)
    parts = [g["cos_phi"] >= MIN_COS_PHI, g["csr"] >= MIN_CSR_RATE, g["theta_std"] > MIN_THETA_STD_DEG]
    record("5", all(parts), f"(a) mean cos(phi) {g['cos_phi']:.4f} (>= {MIN_COS_PHI}) "
                            f"{'ok' if parts[0] else 'MISS'}; (b) ranking satisfaction {g['csr']:.4f} "
                            f"(>= {MIN_CSR_RATE}) {'ok' if parts[1] else 'MISS'}; (c) theta std "
                            f"{g['theta_std']:.2f} deg (> {MIN_THETA_STD_DEG:g}) {'ok' if parts[2] else 'MISS'}; "
                            f"mean of {len(GEOM_SEEDS)} seeds")
    return g


def test_c5a_cross_modal_alignment(grid):
    assert record_c5(grid)["cos_phi"] >= MIN_COS_PHI


def test_c5b_ranking_satisfaction(grid):
    assert record_c5(grid)["csr"] >= MIN_CSR_RATE


def test_c5c_theta_spread(grid):
    assert record_c5(grid)["theta_std"] > MIN_THETA_STD_DEG


# ---------------------------------------------------------------------------
# 6. baseline contrast
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ort_cos_abs(default_splits):
    tr, va, te = default_splits
    cfg = TR.TrainConfig(constraint="ort_cos", beta=ORT_COS_WEIGHT)
    params, _ = TR.train(cfg, tr, va)
    return TR.evaluate(params, te, cfg).angles["pooled"]["mean_abs_cos_theta"]


def record_c6(grid, ort_abs):
    aao_std = geometry(grid)["cos_std"]
    parts = [ort_abs < MAX_ORT_ABS_COS, aao_std > MIN_AAO_COS_STD]
    record("6", all(parts), f"ort_cos (weight {ORT_COS_WEIGHT:g}) mean |cos(theta)| {ort_abs:.4f} "
                            f"(< {MAX_ORT_ABS_COS}) {'ok' if parts[0] else 'MISS'}; aao std of cos(theta) "
                            f"{aao_std:.4f} (> {MIN_AAO_COS_STD}) {'ok' if parts[1] else 'MISS'}")
    return ort_abs, aao_std


def test_c6a_ort_cos_drives_orthogonality(grid, ort_cos_abs):
    assert record_c6(grid, ort_cos_abs)[0] < MAX_ORT_ABS_COS


def test_c6b_aao_keeps_angle_spread(grid, ort_cos_abs):
    assert record_c6(grid, ort_cos_abs)[1] > MIN_AAO_COS_STD


# ---------------------------------------------------------------------------
# 7. ablation harness
# ---------------------------------------------------------------------------

def test_c7_ablation_grid(grid):
    result, seconds, out = grid
    summary = result.summary()
    failures = [f"{r.variant}/{r.seed}: {r.error}" for r in result.runs if not r.ok]
    ok = (len(summary) == len(ablation.VARIANTS) == 9 and len(result.runs) == 9 * len(GEOM_SEEDS)
          and not failures and seconds < GRID_BUDGET_S
          and (out / "ablation_summary.csv").is_file() and (out / "ablation_summary.txt").is_file())
    record("7", ok, f"{len(summary)} variants x {len(GEOM_SEEDS)} seeds, {len(failures)} failed runs "
                    f"(warm-up isolation checked in every run), {seconds / 60:.1f} min (< {GRID_BUDGET_S / 60:g})")
    assert ok, failures


# ---------------------------------------------------------------------------
# 8. format round trip
# ---------------------------------------------------------------------------

def test_c8_format_round_trip(tmp_path):
    ds = dataio.synth_generate(dataio.SynthSpec(num_conversations=7, utterances_per_conversation=5, d=6))
    dataio.write_dataset(ds, tmp_path)
    back = dataio.load_dataset(tmp_path)
    same = all(np.array_equal(a.features(m), b.features(m)) and np.array_equal(a.labels, b.labels) and a.id == b.id
               for a, b in zip(ds.conversations, back.conversations) for m in MODALITIES)
    same &= (back.d, back.num_classes, back.class_names, len(back)) == (ds.d, ds.num_classes, ds.class_names, 7)
    n = ds.num_utterances
    sizes = [(tmp_path / f).stat().st_size for f in dataio.FEATURE_FILES.values()]
    size_ok = all(s == 16 + 8 * n * ds.d for s in sizes)
    raw = bytearray((tmp_path / "audio.aofl").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "audio.aofl").write_bytes(bytes(raw))
    try:
        dataio.load_dataset(tmp_path)
        rejected = False
    except dataio.DatasetError as e:
        rejected = "magic" in str(e)
    ok = same and size_ok and rejected
    record("8", ok, f"round trip identical={same}, size law 16+8*N*d={size_ok} ({sizes[0]} bytes), "
                    f"corrupted magic rejected={rejected}")
    assert ok
