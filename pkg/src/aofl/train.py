"""Training loop, optimiser, evaluation metrics and angle diagnostics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .dataio import ConversationSet
from .model import MODALITIES, OPR_MODES, ModelDims, ModelParams, encode, forward
from .rng import stream
from .tensor import EPS, DegenerateVectorError, DomainError, Tensor, no_grad

log = logging.getLogger(__name__)

CONSTRAINTS = ("aao", "ort_norm", "ort_cos", "none")
COMPONENTS = ("cen", "aac", "csr", "are", "ortho", "ce", "total")


class DivergenceError(FloatingPointError):
    def __init__(self, component: str, value: float, epoch: int | None = None, detail: str = ""):
        self.component, self.value, self.epoch, self.detail = component, value, epoch, detail
        where = "" if epoch is None else f" at epoch {epoch}"
        extra = f": {detail}" if detail else ""
        super().__init__(f"non-finite {component} loss ({value}){where}{extra}")


class WarmupIsolationError(AssertionError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.09
    gamma: float = 0.5
    mu: float = 0.005
    eta: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 40
    warmup_epochs: int = 5
    seed: int = 0
    cen_enabled: bool = True
    are_enabled: bool = True
    aac_enabled: bool = True
    csr_enabled: bool = True
    opr_enabled: bool = True
    opr_mode: str = "scale"
    constraint: str = "aao"
    cen_normalize: bool = True
    d: int | None = None
    num_classes: int | None = None
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int | None = None
    d_c: int | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be nonnegative")
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds epochs ({self.epochs})")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")
        if self.opr_mode not in OPR_MODES:
            raise ValueError(f"opr_mode must be one of {OPR_MODES}, got {self.opr_mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.weights  # noqa: B018  (validates nonnegative weights)

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.gamma, self.mu, self.eta)

    def dims(self, dataset: ConversationSet) -> ModelDims:
        for name, have in (("d", dataset.d), ("num_classes", dataset.num_classes)):
            want = getattr(self, name)
            if want is not None and want != have:
                raise ValueError(f"config {name}={want} but dataset has {name}={have}")
        return ModelDims(d=dataset.d, num_classes=dataset.num_classes, num_layers=self.num_layers,
                         num_heads=self.num_heads, d_ff=self.d_ff, d_c=self.d_c)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split_ratios"] = list(self.split_ratios)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


# ---------------------------------------------------------------------------
# losses for one batch
# ---------------------------------------------------------------------------

def compute_losses(batch, labels, config: TrainConfig, warmup_active: bool = False) -> dict[str, Tensor]:
    """All loss components for one conversation plus the weighted total.

    Components that do not enter the total (disabled by a flag, or during
    warm-up) are still computed for reporting, but outside the graph.
    """
    w = config.weights
    angular_on = not warmup_active
    cen_on = angular_on and config.cen_enabled
    are_on = angular_on and config.constraint == "aao" and config.are_enabled
    ortho_on = angular_on and config.constraint in ("ort_norm", "ort_cos")

    def maybe_graph(active, fn, name=None):
        try:
            if active:
                return fn()
            with no_grad():
                return fn()
        except DomainError as e:  # only reachable through NaN/inf inputs
            raise DivergenceError(name, math.nan, detail=str(e)) from e

    out: dict[str, Tensor] = {}
    out["ce"] = maybe_graph(True, lambda: L.cross_entropy(batch.logits, labels), "ce")
    out["cen"] = maybe_graph(cen_on, lambda: L.cen_loss(batch.g, labels, normalize=config.cen_normalize), "cen")
    cos_theta = [batch.cos_theta[m] for m in MODALITIES]
    aac_on = are_on and config.aac_enabled
    csr_on = are_on and config.csr_enabled
    cos_hat = [batch.cos_theta_hat[m] for m in MODALITIES]
    cos_phi = [batch.cos_phi_mean(m) for m in MODALITIES]
    out["aac"] = maybe_graph(aac_on, lambda: L.aac_loss(cos_theta, cos_hat), "aac")
    out["csr"] = maybe_graph(csr_on, lambda: L.csr_loss(cos_phi, cos_theta), "csr")
    gamma = w.gamma if config.aac_enabled else 0.0
    mu = w.mu if config.csr_enabled else 0.0
    out["are"] = L.are_loss(out["aac"], out["csr"], gamma, mu)
    kind = config.constraint if config.constraint in ("ort_norm", "ort_cos") else "ort_cos"
    out["ortho"] = maybe_graph(ortho_on, lambda: L.ortho_baseline_loss(kind, batch.g, batch.h), "ortho")

    angular = out["are"] if are_on else out["ortho"] if ortho_on else None
    out["total"] = L.total_loss(out["cen"] if cen_on else None, angular, out["ce"], w, warmup_active)
    return out


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. A missing gradient counts as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.named():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
    return cm


def per_class_f1(confusion) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    den = 2 * tp + fp + fn
    return np.divide(2 * tp, den, out=np.zeros_like(tp), where=den > 0)


def weighted_f1(confusion) -> float:
    """Support-weighted mean of per-class F1 (rows are true classes)."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    support = cm.sum(axis=1).astype(np.float64)
    if support.sum() == 0:
        raise ValueError("weighted F1 of an all-zero confusion matrix")
    return float((support * per_class_f1(cm)).sum() / support.sum())


def accuracy(confusion) -> float:
    cm = np.asarray(confusion)
    return float(np.trace(cm) / cm.sum())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _degrees(cos: np.ndarray) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def angle_statistics(cos_theta: dict[str, np.ndarray], cos_phi: dict[str, np.ndarray],
                     cos_phi_pairs: np.ndarray) -> dict:
    """Summaries of shared/specific (theta) and cross-modal shared (phi) angles.

    ``cos_phi`` is per modality, averaged over the two partner modalities, as
    used by the ranking hinge; ``cos_phi_pairs`` pools the three unordered
    pair cosines.
    """
    stats: dict = {}
    for m in MODALITIES:
        th, ph = _degrees(cos_theta[m]), _degrees(cos_phi[m])
        stats[m] = {
            "theta_mean_deg": float(th.mean()), "theta_std_deg": float(th.std()),
            "phi_mean_deg": float(ph.mean()), "phi_std_deg": float(ph.std()),
            "csr_satisfaction": float(np.mean(cos_phi[m] >= cos_theta[m])),
        }
    ct = np.concatenate([cos_theta[m] for m in MODALITIES])
    cp = np.concatenate([cos_phi[m] for m in MODALITIES])
    th = _degrees(ct)
    stats["pooled"] = {
        "theta_mean_deg": float(th.mean()),
        "theta_std_deg": float(th.std()),
        "phi_mean_deg": float(_degrees(cos_phi_pairs).mean()),
        "phi_std_deg": float(_degrees(cos_phi_pairs).std()),
        "cos_theta_mean": float(ct.mean()),
        "cos_theta_std": float(ct.std()),
        "mean_abs_cos_theta": float(np.abs(ct).mean()),
        "cos_phi_mean": float(cos_phi_pairs.mean()),
        "csr_satisfaction": float(np.mean(cp >= ct)),
    }
    return stats


@dataclass
class EvalReport:
    accuracy: float
    weighted_f1: float
    per_class_f1: list[float]
    confusion: list[list[int]]
    angles: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def summary_rows(self) -> list[dict]:
        rows = [{"metric": "accuracy", "value": self.accuracy}, {"metric": "weighted_f1", "value": self.weighted_f1}]
        rows += [{"metric": f"f1_class{c}", "value": f} for c, f in enumerate(self.per_class_f1)]
        for scope, stats in self.angles.items():
            rows += [{"metric": f"{scope}.{k}", "value": v} for k, v in stats.items()]
        return rows


def conversation_inputs(conv):
    return [conv.features(m) for m in MODALITIES]


def evaluate(params: ModelParams, dataset: ConversationSet, config: TrainConfig | None = None) -> EvalReport:
    config = config or TrainConfig()
    y_true, y_pred = [], []
    cos_theta = {m: [] for m in MODALITIES}
    cos_phi = {m: [] for m in MODALITIES}
    pairs = []
    with no_grad():
        for conv in dataset.conversations:
            batch = forward(*conversation_inputs(conv), params, config.opr_enabled, config.opr_mode)
            if not config.opr_enabled:
                for m in MODALITIES:
                    expect = np.concatenate([batch.g[m].data, batch.h[m].data], axis=1)
                    if not np.array_equal(batch.x_refined[m].data, expect):
                        raise AssertionError(f"refinement disabled but x_refined[{m}] != [g, h]")
            y_true.append(conv.labels)
            y_pred.append(batch.logits.data.argmax(axis=1))
            for m in MODALITIES:
                cos_theta[m].append(batch.cos_theta[m].data[:, 0])
                cos_phi[m].append(batch.cos_phi_mean(m).data[:, 0])
            pairs += [batch.cos_phi[p].data[:, 0] for p in (("a", "t"), ("a", "v"), ("t", "v"))]
    cm = confusion_matrix(np.concatenate(y_true), np.concatenate(y_pred), dataset.num_classes)
    angles = angle_statistics({m: np.concatenate(v) for m, v in cos_theta.items()},
                              {m: np.concatenate(v) for m, v in cos_phi.items()},
                              np.concatenate(pairs))
    return EvalReport(accuracy(cm), weighted_f1(cm), per_class_f1(cm).tolist(), cm.tolist(), angles)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    warmup: bool
    cen: float
    aac: float
    csr: float
    are: float
    ortho: float
    ce: float
    total: float
    angle_grad_max: float
    valid_accuracy: float
    valid_weighted_f1: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.epochs)

    def rows(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.epochs]


def _angle_grad_max(params: ModelParams) -> float:
    gs = [params[n].grad for n in ("angle.W", "angle.b")]
    return max((float(np.abs(g).max()) for g in gs if g is not None), default=0.0)


def train(config: TrainConfig, train_set: ConversationSet, valid_set: ConversationSet,
          params: ModelParams | None = None, on_epoch=None) -> tuple[ModelParams, TrainHistory]:
    """Optimise the joint objective one conversation per step.

    Returns the parameters from the epoch with the best validation weighted
    F1 (ties go to the later epoch), and the per-epoch history. During warm-up
    only cross-entropy is optimised and the angle head is checked to receive
    exactly zero gradient. ``on_epoch(record, params)`` is called after each
    epoch.
    """
    config.validate()
    if not train_set.conversations or not valid_set.conversations:
        raise ValueError("train and validation sets must be nonempty")
    if (train_set.d, train_set.num_classes) != (valid_set.d, valid_set.num_classes):
        raise ValueError("train and validation sets disagree in d or num_classes")
    dims = config.dims(train_set)
    params = params or ModelParams.init(dims, config.seed)
    history = TrainHistory()
    if config.epochs == 0:
        return params, history

    state = AdamState()
    best, best_f1 = params.copy(), -math.inf
    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        order = stream(config.seed, "shuffle", epoch).permutation(len(train_set))
        sums = dict.fromkeys(COMPONENTS, 0.0)
        grad_max = 0.0
        for ci in order:
            conv = train_set.conversations[ci]
            try:
                batch = forward(*conversation_inputs(conv), params, config.opr_enabled, config.opr_mode)
                comps = compute_losses(batch, conv.labels, config, warmup_active=warm)
            except DegenerateVectorError as e:
                raise DivergenceError("forward", math.nan, epoch, str(e)) from e
            except DivergenceError as e:
                raise DivergenceError(e.component, e.value, epoch, e.detail) from e
            for name, t in comps.items():
                value = t.item()
                if not math.isfinite(value):
                    raise DivergenceError(name, value, epoch)
                sums[name] += value
            params.zero_grad()
            comps["total"].backward()
            gm = _angle_grad_max(params)
            if warm and gm != 0.0:
                raise WarmupIsolationError(f"angle head received gradient {gm} during warm-up epoch {epoch}")
            grad_max = max(grad_max, gm)
            optimizer_step(params, state, config.learning_rate)
        report = evaluate(params, valid_set, config)
        n = len(order)
        history.epochs.append(EpochRecord(epoch, warm, *(sums[c] / n for c in COMPONENTS), grad_max,
                                          report.accuracy, report.weighted_f1))
        if on_epoch is not None:
            on_epoch(history.epochs[-1], params)
        log.debug("epoch %d total=%.4f valid_acc=%.4f", epoch, sums["total"] / n, report.accuracy)
        if report.weighted_f1 >= best_f1:
            best_f1, best = report.weighted_f1, params.copy()
            history.best_epoch = epoch
    return best, history


# ---------------------------------------------------------------------------
# angle report
# ---------------------------------------------------------------------------

def _safe_cos(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    bad = (nu <= EPS) | (nv <= EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(bad, np.nan, (u * v).sum(axis=1) / (nu * nv))
    return np.clip(c, -1.0, 1.0), bad


@dataclass
class AngleReport:
    rows: list[dict]
    projection: list[dict]
    explained_variance: list[float]

    @property
    def degenerate_rows(self) -> int:
        return sum(r["degenerate"] for r in self.rows)


def angle_report(params: ModelParams, dataset: ConversationSet) -> AngleReport:
    """Per-utterance angles in degrees and a 2-D principal-axis projection of
    the pooled shared and specific features.

    Utterances with a near-zero feature are flagged ``degenerate`` and their
    angles left as NaN.
    """
    rows, feats, meta = [], [], []
    with no_grad():
        for conv in dataset.conversations:
            X = {m: Tensor(conv.features(m)) for m in MODALITIES}
            g, h = encode(X, params)
            g = {m: g[m].data for m in MODALITIES}
            h = {m: h[m].data for m in MODALITIES}
            theta, bad = {}, np.zeros(len(conv), bool)
            for m in MODALITIES:
                theta[m], b = _safe_cos(g[m], h[m])
                bad |= b
            phi = {}
            for a, b_ in (("a", "t"), ("a", "v"), ("t", "v")):
                phi[a + b_], b = _safe_cos(g[a], g[b_])
                bad |= b
            for i, u in enumerate(conv.utterances):
                row = {"conversation": conv.id, "utterance": i, "label": u.label}
                for m in MODALITIES:
                    row[f"theta_{m}"] = float(np.degrees(np.arccos(theta[m][i])))
                for key, c in phi.items():
                    row[f"phi_{key}"] = float(np.degrees(np.arccos(c[i])))
                ok = True
                for m in MODALITIES:
                    partners = [phi["".join(sorted((m, s), key=MODALITIES.index))][i] for s in MODALITIES if s != m]
                    ok &= bool(np.mean(partners) >= theta[m][i])
                row["csr_ok"] = bool(ok and not bad[i])
                row["degenerate"] = bool(bad[i])
                rows.append(row)
                for m in MODALITIES:
                    for kind, arr in (("g", g[m]), ("h", h[m])):
                        feats.append(arr[i])
                        meta.append({"conversation": conv.id, "utterance": i, "modality": m, "kind": kind,
                                     "label": u.label})
    proj, var = _principal_projection(np.array(feats))
    projection = [{**mt, "pc1": float(p[0]), "pc2": float(p[1])} for mt, p in zip(meta, proj)]
    return AngleReport(rows, projection, var)


def _principal_projection(X: np.ndarray) -> tuple[np.ndarray, list[float]]:
    """Project onto the top two principal axes; each axis is signed so that its
    largest-magnitude loading is positive."""
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = vt[:2]
    for k in range(axes.shape[0]):
        if axes[k, np.argmax(np.abs(axes[k]))] < 0:
            axes[k] = -axes[k]
    proj = Xc @ axes.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    total = float((s ** 2).sum())
    var = [float(v / total) if total > 0 else 0.0 for v in (s[:2] ** 2)]
    return proj, var


# ---------------------------------------------------------------------------
# tabular output
# ---------------------------------------------------------------------------

def write_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Aligned plain-text table; floats printed with 4 decimals."""
    if not rows:
        return ""
    columns = list(columns or rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[k]) for row in cells)) for k, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"
