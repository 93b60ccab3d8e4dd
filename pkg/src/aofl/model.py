"""Shared/specific encoders, angle head, refinement, context encoders and
classifier, plus the binary checkpoint format.

All per-utterance computations are vectorised over the rows of an ``N x d``
matrix holding one conversation, so a row of the input is one utterance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import ContractError, DegenerateVectorError, EPS, ShapeError, Tensor

MODALITIES = ("a", "t", "v")
PAIRS = tuple((m, s) for m in MODALITIES for s in MODALITIES if m != s)
OPR_MODES = ("scale", "reject")

CHECKPOINT_MAGIC = b"AOFL"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4s7I")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d: int
    num_classes: int
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int | None = None
    d_c: int | None = None

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d)
        if self.d_c is None:
            object.__setattr__(self, "d_c", 2 * self.d)
        if min(self.d, self.num_classes, self.num_heads, self.d_ff, self.d_c) < 1 or self.num_layers < 0:
            raise ValueError(f"invalid model dimensions {self}")
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")


def param_layout(dims: ModelDims) -> list[tuple[str, tuple[int, int]]]:
    """Names and shapes of every parameter, in checkpoint order.

    Affine layers store ``W`` as (fan_in, fan_out) and ``b`` as (1, fan_out);
    the angle head stores ``W`` as (1, 2d) and ``b`` as (1, 1).
    """
    d, dff, dc, k = dims.d, dims.d_ff, dims.d_c, dims.num_classes
    layout: list[tuple[str, tuple[int, int]]] = []

    def affine(prefix, n_in, n_out):
        layout.append((f"{prefix}.W", (n_in, n_out)))
        layout.append((f"{prefix}.b", (1, n_out)))

    affine("shared.l1", d, d)
    affine("shared.l2", d, d)
    for m in MODALITIES:
        affine(f"specific.{m}.l1", d, d)
        affine(f"specific.{m}.l2", d, d)
    layout.append(("angle.W", (1, 2 * d)))
    layout.append(("angle.b", (1, 1)))
    for m in MODALITIES:
        for layer in range(dims.num_layers):
            p = f"context.{m}.{layer}"
            for proj in ("q", "k", "v", "o"):
                affine(f"{p}.{proj}", d, d)
            affine(f"{p}.ff1", d, dff)
            affine(f"{p}.ff2", dff, d)
    affine("classifier.fc", 6 * d, dc)
    affine("classifier.mlp1", dc, dc)
    affine("classifier.mlp2", dc, k)
    return layout


def param_count(dims: ModelDims) -> int:
    """Closed form of ``sum(prod(shape) for _, shape in param_layout(dims))``."""
    d, L, dff, dc, k = dims.d, dims.num_layers, dims.d_ff, dims.d_c, dims.num_classes
    encoders = 4 * 2 * (d * d + d)
    angle = 2 * d + 1
    context = 3 * L * (4 * (d * d + d) + (d * dff + dff) + (dff * d + d))
    classifier = (6 * d * dc + dc) + (dc * dc + dc) + (dc * k + k)
    return encoders + angle + context + classifier


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @classmethod
    def init(cls, dims: ModelDims, seed: int = 0) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = stream(seed, "init")
        layout = param_layout(dims)
        fan_in = {}
        for name, shape in layout:
            if name.endswith(".W"):
                fan_in[name[:-2]] = shape[1] if name == "angle.W" else shape[0]
        tensors = {}
        for name, shape in layout:
            bound = 1.0 / math.sqrt(fan_in[name[:-2]])
            tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        return cls(dims, tensors)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParams":
        return cls(dims, {n: Tensor(np.zeros(s), requires_grad=True) for n, s in param_layout(dims)})


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W + T.expand_rows(b, x.rows)


def _two_layer(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    d = params.dims.d
    if x.cols != d:
        raise ShapeError(f"{prefix}: expected feature length {d}, got {x.cols}")
    hidden = T.relu(affine(x, params[f"{prefix}.l1.W"], params[f"{prefix}.l1.b"]))
    return affine(hidden, params[f"{prefix}.l2.W"], params[f"{prefix}.l2.b"])


def shared_encode(x: Tensor, params: ModelParams) -> Tensor:
    """Shared feature; the same weights serve every modality."""
    return _two_layer(x, params, "shared")


def specific_encode(x: Tensor, params: ModelParams, modality: str) -> Tensor:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    return _two_layer(x, params, f"specific.{modality}")


def predict_angle(g: Tensor, h: Tensor, params: ModelParams) -> Tensor:
    """Predicted cosine tanh(W [g, h]^T + b), one row per utterance."""
    W, b = params["angle.W"], params["angle.b"]
    gh = T.concat(g, h, axis=1)
    if gh.cols != W.cols:
        raise ShapeError(f"angle head: [g, h] has {gh.cols} columns, W is {W.shape}")
    return T.tanh(gh @ W.T + T.expand_rows(b, gh.rows))


def opr_refine(h: Tensor, cos_theta: Tensor, g: Tensor, mode: str = "scale") -> Tensor:
    """Remove the part of ``h`` that is redundant with ``g``.

    ``scale`` computes h - h * cos(theta). ``reject`` subtracts
    (|h| cos(theta)) g / |g|, the projection of h onto g, so the result is
    orthogonal to g.
    """
    d = h.cols
    if mode == "scale":
        return h * T.expand_cols(1.0 - cos_theta, d)
    if mode == "reject":
        g_norm = T.row_norm(g)
        if np.any(g_norm.data <= EPS):
            raise DegenerateVectorError("reject-mode refinement needs a nonzero shared feature")
        coef = T.row_norm(h) * cos_theta / g_norm
        return h - T.expand_cols(coef, d) * g
    raise ValueError(f"opr mode must be one of {OPR_MODES}, got {mode!r}")


def self_attention(G: Tensor, params: ModelParams, prefix: str) -> Tensor:
    heads = params.dims.num_heads
    d = G.cols
    dh = d // heads
    q = affine(G, params[f"{prefix}.q.W"], params[f"{prefix}.q.b"])
    k = affine(G, params[f"{prefix}.k.W"], params[f"{prefix}.k.b"])
    v = affine(G, params[f"{prefix}.v.W"], params[f"{prefix}.v.b"])
    outs = []
    for i in range(heads):
        lo, hi = i * dh, (i + 1) * dh
        qh, kh, vh = T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi), T.slice_cols(v, lo, hi)
        weights = T.softmax_rows(T.scale(qh @ kh.T, 1.0 / math.sqrt(dh)))
        outs.append(weights @ vh)
    merged = T.concat(*outs, axis=1) if heads > 1 else outs[0]
    return affine(merged, params[f"{prefix}.o.W"], params[f"{prefix}.o.b"])


def context_encode(G: Tensor, params: ModelParams, modality: str) -> Tensor:
    """L residual self-attention + feed-forward layers over the utterance rows.

    There is no positional encoding, so permuting the rows of ``G`` permutes
    the output rows the same way.
    """
    if G.rows < 1:
        raise ShapeError("context encoder needs at least one utterance")
    for layer in range(params.dims.num_layers):
        p = f"context.{modality}.{layer}"
        G = G + self_attention(G, params, p)
        ff = affine(T.relu(affine(G, params[f"{p}.ff1.W"], params[f"{p}.ff1.b"])),
                    params[f"{p}.ff2.W"], params[f"{p}.ff2.b"])
        G = G + ff
    return G


def classify(x_a: Tensor | None, x_t: Tensor | None, x_v: Tensor | None, params: ModelParams) -> Tensor:
    """Raw class logits from the three refined features."""
    if x_a is None or x_t is None or x_v is None:
        raise ContractError("classifier needs all three modalities")
    x = T.concat(x_a, x_t, x_v, axis=1)
    if x.cols != 6 * params.dims.d:
        raise ShapeError(f"classifier input has {x.cols} columns, expected {6 * params.dims.d}")
    z = T.relu(affine(x, params["classifier.fc.W"], params["classifier.fc.b"]))
    z = T.relu(affine(z, params["classifier.mlp1.W"], params["classifier.mlp1.b"]))
    return affine(z, params["classifier.mlp2.W"], params["classifier.mlp2.b"])


# ---------------------------------------------------------------------------
# full pass
# ---------------------------------------------------------------------------

@dataclass
class DisentangledBatch:
    """Intermediate features of one conversation, keyed by modality.

    Per-utterance scalars (cosines) are ``N x 1`` columns; ``cos_phi`` is keyed
    by ordered modality pair.
    """

    g: dict[str, Tensor]
    h: dict[str, Tensor]
    cos_theta: dict[str, Tensor]
    cos_theta_hat: dict[str, Tensor]
    h_refined: dict[str, Tensor]
    g_context: dict[str, Tensor]
    x_refined: dict[str, Tensor]
    cos_phi: dict[tuple[str, str], Tensor]
    logits: Tensor
    opr_enabled: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def num_utterances(self) -> int:
        return self.logits.rows

    def cos_phi_mean(self, m: str) -> Tensor:
        """Cross-modal shared cosine of modality m averaged over the other two."""
        others = [self.cos_phi[(m, s)] for s in MODALITIES if s != m]
        return T.scale(others[0] + others[1], 0.5)


def _as_input(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def encode(X: dict[str, Tensor], params: ModelParams) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    g = {m: shared_encode(X[m], params) for m in MODALITIES}
    h = {m: specific_encode(X[m], params, m) for m in MODALITIES}
    return g, h


def forward(X_a, X_t, X_v, params: ModelParams, opr_enabled: bool = True, opr_mode: str = "scale") -> DisentangledBatch:
    """Run one conversation (rows = utterances) through the whole network."""
    X = {"a": _as_input(X_a), "t": _as_input(X_t), "v": _as_input(X_v)}
    shapes = {m: x.shape for m, x in X.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"modalities disagree in shape: {shapes}")
    if X["a"].cols != params.dims.d:
        raise ShapeError(f"features have d={X['a'].cols}, model expects d={params.dims.d}")

    g, h = encode(X, params)
    cos_theta = {m: T.row_cosine(g[m], h[m]) for m in MODALITIES}
    cos_theta_hat = {m: predict_angle(g[m], h[m], params) for m in MODALITIES}
    sym = {}
    cos_phi = {}
    for m, s in PAIRS:
        key = tuple(sorted((m, s)))
        if key not in sym:
            sym[key] = T.row_cosine(g[m], g[s])
        cos_phi[(m, s)] = sym[key]

    if opr_enabled:
        h_ref = {m: opr_refine(h[m], cos_theta[m], g[m], opr_mode) for m in MODALITIES}
        g_ctx = {m: context_encode(g[m], params, m) for m in MODALITIES}
    else:
        h_ref, g_ctx = dict(h), dict(g)
    x_ref = {m: T.concat(g_ctx[m], h_ref[m], axis=1) for m in MODALITIES}
    logits = classify(x_ref["a"], x_ref["t"], x_ref["v"], params)
    return DisentangledBatch(g, h, cos_theta, cos_theta_hat, h_ref, g_ctx, x_ref, cos_phi, logits, opr_enabled)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Header (magic, version, d, L, d_ff, d_c, num_classes, num_heads as
    little-endian u32) followed by every parameter in :func:`param_layout`
    order as row-major little-endian float64."""
    dims = params.dims
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, dims.d, dims.num_layers,
                               dims.d_ff, dims.d_c, dims.num_classes, dims.num_heads)
    chunks = [header]
    for name, shape in param_layout(dims):
        arr = params[name].data
        if arr.shape != shape:
            raise CheckpointError(f"{name} has shape {arr.shape}, layout says {shape}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint_header(path) -> tuple[int, ModelDims]:
    raw = Path(path).read_bytes()[:_CKPT_HEADER.size]
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, d, L, dff, dc, k, heads = _CKPT_HEADER.unpack(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    return version, ModelDims(d=d, num_classes=k, num_layers=L, num_heads=heads, d_ff=dff, d_c=dc)


def load_checkpoint(path) -> ModelParams:
    _, dims = read_checkpoint_header(path)
    raw = Path(path).read_bytes()
    expected = _CKPT_HEADER.size + 8 * param_count(dims)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: size {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEADER.size)
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{path}: non-finite parameter values")
    tensors = {}
    pos = 0
    for name, shape in param_layout(dims):
        n = shape[0] * shape[1]
        tensors[name] = Tensor(flat[pos:pos + n].reshape(shape), requires_grad=True)
        pos += n
    return ModelParams(dims, tensors)
