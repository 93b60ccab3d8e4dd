"""Training objectives.

Every function takes and returns :class:`~aofl.tensor.Tensor` values so the
result can be backpropagated. Per-utterance inputs are ``N x 1`` columns or
``N x d`` matrices keyed by modality, as produced by :func:`aofl.model.forward`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import MODALITIES, PAIRS
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0    # consistency enhancement
    beta: float = 0.09    # angular term (ARE, or the orthogonality baseline replacing it)
    gamma: float = 0.5    # AAC inside ARE
    mu: float = 0.005     # CSR inside ARE
    eta: float = 1.0      # cross-entropy

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


def _labels(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.int64).ravel()


def negative_mask(labels) -> np.ndarray:
    """``M[i, j]`` is 1 when utterance j may serve as a negative for anchor i."""
    y = _labels(labels)
    return (y[:, None] != y[None, :]).astype(np.float64)


def cen_term(anchor: Tensor, positive: Tensor, negatives: Sequence[Tensor]) -> Tensor:
    """One anchor/positive contrastive term with raw dot products.

    Reference form used for worked examples; :func:`cen_loss` is the batched
    version.
    """
    pos = T.dot(anchor, positive)
    if not negatives:
        return Tensor(0.0)
    terms = [T.exp(pos)] + [T.exp(T.dot(anchor, n)) for n in negatives]
    den = terms[0]
    for t in terms[1:]:
        den = den + t
    return T.log(den) - pos


def cen_loss(g: Mapping[str, Tensor], labels, normalize: bool = True) -> Tensor:
    """Contrastive cross-modal consistency loss over one batch.

    For anchor g[m][i] and each other modality s the positive is g[s][i];
    negatives are g[k][j] for every modality k and every utterance j whose
    label differs from label i. The mean runs over all six ordered modality
    pairs and all utterances; anchors with no negatives contribute 0.
    """
    y = _labels(labels)
    n = g[MODALITIES[0]].rows
    if len(y) != n:
        raise ShapeError(f"cen_loss: {n} utterances but {len(y)} labels")
    feats = {m: T.normalize_rows(g[m]) if normalize else g[m] for m in MODALITIES}
    mask = negative_mask(y)
    has_neg = mask.sum(axis=1, keepdims=True) > 0
    if not has_neg.any():
        return Tensor(0.0)

    # anchor-vs-negative similarity blocks, shared by both positives of an anchor
    sims = {m: {k: feats[m] @ feats[k].T for k in MODALITIES} for m in MODALITIES}
    neg_max = {m: np.max([np.where(mask > 0, sims[m][k].data, -np.inf).max(axis=1) for k in MODALITIES], axis=0)
               for m in MODALITIES}
    # additive mask: excluded pairs become exp(-inf) = 0 without inf * 0
    mask_offset = Tensor(np.where(mask > 0, 0.0, -np.inf))
    anchor_on = Tensor(has_neg.astype(np.float64))
    total = None
    for m, s in PAIRS:
        pos = T.reduce_sum(feats[m] * feats[s], axis=1)
        # constant shift for a stable log-sum-exp; rows without negatives use 0
        shift = np.where(has_neg[:, 0], np.maximum(pos.data[:, 0], neg_max[m]), 0.0)[:, None]
        shift_t = Tensor(shift)
        den = T.exp(pos - shift_t)
        for k in MODALITIES:
            e = T.exp(sims[m][k] - T.expand_cols(shift_t, n) + mask_offset)
            den = den + T.reduce_sum(e, axis=1)
        term = (T.log(den) - (pos - shift_t)) * anchor_on
        total = T.reduce_sum(term) if total is None else total + T.reduce_sum(term)
    return T.scale(total, 1.0 / (len(PAIRS) * n))


def _stack(cols: Sequence[Tensor] | Mapping[str, Tensor]) -> Tensor:
    if isinstance(cols, Mapping):
        cols = [cols[m] for m in MODALITIES]
    if isinstance(cols, Tensor):
        return cols
    return T.concat(*cols, axis=0) if len(cols) > 1 else cols[0]


def aac_loss(cos_theta, cos_theta_hat) -> Tensor:
    """Pooled RMSE between actual and predicted shared/specific cosines."""
    a, p = _stack(cos_theta), _stack(cos_theta_hat)
    if a.data.size == 0:
        raise ShapeError("aac_loss of empty input")
    return T.sqrt(T.reduce_mean(T.square(a - p)))


def csr_loss(cos_phi, cos_theta) -> Tensor:
    """Mean hinge max(cos(phi) - cos(theta), 0); zero when every shared/specific
    angle is at least the cross-modal shared angle."""
    phi, theta = _stack(cos_phi), _stack(cos_theta)
    if phi.data.size == 0:
        raise ShapeError("csr_loss of empty input")
    return T.reduce_mean(T.relu(phi - theta))


def are_loss(aac: Tensor, csr: Tensor, gamma: float, mu: float) -> Tensor:
    return T.scale(aac, gamma) + T.scale(csr, mu)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    y = _labels(labels)
    n, k = logits.shape
    if len(y) != n:
        raise ShapeError(f"cross_entropy: {n} rows of logits but {len(y)} labels")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    shifted = logits - T.expand_cols(T.row_max(logits), k)
    lse = T.log(T.reduce_sum(T.exp(shifted), axis=1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    picked = T.reduce_sum(shifted * Tensor(onehot), axis=1)
    return T.reduce_mean(lse - picked)


def total_loss(cen: Tensor | None, are: Tensor | None, ce: Tensor, weights: LossWeights,
               warmup_active: bool = False) -> Tensor:
    """alpha*CEN + beta*ARE + eta*CE; only the CE term during warm-up.

    ``None`` components are treated as disabled.
    """
    out = T.scale(ce, weights.eta)
    if warmup_active:
        return out
    if cen is not None:
        out = out + T.scale(cen, weights.alpha)
    if are is not None:
        out = out + T.scale(are, weights.beta)
    return out


def ortho_baseline_loss(kind: str, g: Mapping[str, Tensor], h: Mapping[str, Tensor]) -> Tensor:
    """Full-disentanglement penalties used as ablation baselines.

    ``ort_norm``: ||G^T H||_F^2 / (N d^2) averaged over modalities.
    ``ort_cos``: mean squared cosine between g and h over all (m, i).
    """
    for m in MODALITIES:
        if g[m].shape != h[m].shape:
            raise ShapeError(f"ortho_baseline_loss: G and H differ for {m}: {g[m].shape} vs {h[m].shape}")
    if kind == "ort_norm":
        n, d = g[MODALITIES[0]].shape
        parts = [T.reduce_sum(T.square(g[m].T @ h[m])) for m in MODALITIES]
        return T.scale(parts[0] + parts[1] + parts[2], 1.0 / (3 * n * d * d))
    if kind == "ort_cos":
        cos = T.concat(*[T.row_cosine(g[m], h[m]) for m in MODALITIES], axis=0)
        return T.reduce_mean(T.square(cos))
    raise ValueError(f"unknown orthogonality baseline {kind!r}")
