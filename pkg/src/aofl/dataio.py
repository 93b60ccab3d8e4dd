"""Conversation datasets: in-memory model, on-disk format, synthetic generator.

A dataset directory holds ``manifest.json`` plus one feature file per
modality (``audio.aofl``, ``text.aofl``, ``visual.aofl``). Feature files are a
16-byte little-endian header (magic ``AOFL``, version, rows, cols as u32)
followed by row-major float64 values. Manifest rows index all three files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MODALITIES
from .rng import stream

FEATURE_MAGIC = b"AOFL"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1
FEATURE_FILES = {"a": "audio.aofl", "t": "text.aofl", "v": "visual.aofl"}
_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    """Missing, malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class Utterance:
    x_a: np.ndarray
    x_t: np.ndarray
    x_v: np.ndarray
    label: int

    def feature(self, m: str) -> np.ndarray:
        return {"a": self.x_a, "t": self.x_t, "v": self.x_v}[m]


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise DatasetError(f"conversation {self.id!r} is empty")

    def __len__(self):
        return len(self.utterances)

    def features(self, m: str) -> np.ndarray:
        return np.stack([u.feature(m) for u in self.utterances])

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)


@dataclass(frozen=True)
class ConversationSet:
    conversations: tuple[Conversation, ...]
    num_classes: int
    d: int
    class_names: tuple[str, ...] = ()
    ground_truth: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class{c}" for c in range(self.num_classes)))
        if len(self.class_names) != self.num_classes:
            raise DatasetError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        for conv in self.conversations:
            for u in conv.utterances:
                for m in MODALITIES:
                    if u.feature(m).shape != (self.d,):
                        raise DatasetError(f"conversation {conv.id!r}: feature {m} has shape "
                                           f"{u.feature(m).shape}, expected ({self.d},)")
                if not 0 <= u.label < self.num_classes:
                    raise DatasetError(f"conversation {conv.id!r}: label {u.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.conversations)

    @property
    def num_utterances(self) -> int:
        return sum(len(c) for c in self.conversations)

    def labels(self) -> np.ndarray:
        return np.concatenate([c.labels for c in self.conversations]) if self.conversations else np.zeros(0, int)

    def subset(self, indices: Sequence[int]) -> "ConversationSet":
        return ConversationSet(tuple(self.conversations[i] for i in indices), self.num_classes, self.d, self.class_names)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_features(path, array: np.ndarray) -> None:
    rows, cols = array.shape
    payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols) + payload)


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing feature file {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise DatasetError(f"{path}: {len(raw)} bytes but header implies {expected}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DatasetError(f"{path}: non-finite feature value")
    return data


def write_dataset(dataset: ConversationSet, directory) -> None:
    """Write manifest and feature files; output is a pure function of ``dataset``."""
    if not dataset.conversations:
        raise DatasetError("refusing to write a dataset with no conversations")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    convs = []
    row = 0
    for conv in dataset.conversations:
        utts = []
        for u in conv.utterances:
            utts.append({"row": row, "label": int(u.label)})
            row += 1
        convs.append({"id": conv.id, "utterances": utts})
    manifest = {
        "version": MANIFEST_VERSION,
        "d": dataset.d,
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names),
        "conversations": convs,
    }
    for m, fname in FEATURE_FILES.items():
        feats = np.stack([u.feature(m) for c in dataset.conversations for u in c.utterances])
        write_features(directory / fname, feats)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(directory) -> ConversationSet:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        d = int(manifest["d"])
        num_classes = int(manifest["num_classes"])
        conv_specs = manifest["conversations"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{mpath}: malformed manifest ({e})") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{mpath}: unsupported manifest version {manifest.get('version')!r}")
    n_rows = sum(len(c["utterances"]) for c in conv_specs)

    feats = {}
    for m, fname in FEATURE_FILES.items():
        arr = read_features(directory / fname)
        if arr.shape[0] != n_rows:
            raise DatasetError(f"{fname}: has {arr.shape[0]} rows but manifest lists {n_rows} utterances")
        if arr.shape[1] != d:
            raise DatasetError(f"{fname}: has {arr.shape[1]} columns but manifest says d={d}")
        feats[m] = arr

    convs = []
    for c in conv_specs:
        utts = []
        for u in c["utterances"]:
            r = int(u["row"])
            if not 0 <= r < n_rows:
                raise DatasetError(f"{mpath}: row index {r} out of range")
            utts.append(Utterance(feats["a"][r], feats["t"][r], feats["v"][r], int(u["label"])))
        convs.append(Conversation(str(c["id"]), tuple(utts)))
    return ConversationSet(tuple(convs), num_classes, d, tuple(manifest.get("class_names", ())))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_conversations: int = 100
    utterances_per_conversation: int = 8
    d: int = 16
    num_classes: int = 4
    shared_strength: float = 0.6
    specific_strength: float = 0.3
    noise_std: float = 0.1
    seed: int = 1

    def __post_init__(self):
        if self.num_conversations < 1 or self.utterances_per_conversation < 1:
            raise ValueError("need at least one conversation and one utterance per conversation")
        if self.d < 1 or self.num_classes < 1:
            raise ValueError("d and num_classes must be positive")
        for name in ("shared_strength", "specific_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.shared_strength + self.specific_strength > 1.0 + 1e-12:
            raise ValueError("shared_strength + specific_strength must not exceed 1 "
                             f"(got {self.shared_strength} + {self.specific_strength})")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


def _orthonormal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def synth_generate(spec: SynthSpec) -> ConversationSet:
    """Class-conditional multimodal features with known shared/specific parts.

    Each class c owns a shared code (one fixed vector, identical across
    modalities) and one specific mean per modality. An utterance of class c
    gets, per modality m,

        x_m = rho_s * A_m z_c + rho_p * B_m (nu_{m,c} + xi_m) + sigma * eps

    where A_m, B_m are seeded orthonormal maps, xi_m is a unit Gaussian
    utterance-level specific variation drawn independently per modality and
    eps is unit Gaussian noise. Codes are kept in ``ground_truth``.
    """
    rng = stream(spec.seed, "synth")
    d, k = spec.d, spec.num_classes
    A = {m: _orthonormal(rng, d) for m in MODALITIES}
    B = {m: _orthonormal(rng, d) for m in MODALITIES}
    shared_means = rng.normal(size=(k, d))
    specific_means = {m: rng.normal(size=(k, d)) for m in MODALITIES}

    n_conv, n_utt = spec.num_conversations, spec.utterances_per_conversation
    total = n_conv * n_utt
    labels = rng.integers(0, k, size=total)
    z = shared_means[labels]
    spec_codes = {m: specific_means[m][labels] + rng.normal(size=(total, d)) for m in MODALITIES}
    feats = {}
    for m in MODALITIES:
        noise = rng.normal(size=(total, d))
        feats[m] = (spec.shared_strength * z @ A[m].T
                    + spec.specific_strength * spec_codes[m] @ B[m].T
                    + spec.noise_std * noise)

    width = max(1, len(str(n_conv - 1)))
    convs = []
    for c in range(n_conv):
        rows = range(c * n_utt, (c + 1) * n_utt)
        utts = tuple(Utterance(feats["a"][r].copy(), feats["t"][r].copy(), feats["v"][r].copy(), int(labels[r]))
                     for r in rows)
        convs.append(Conversation(f"synth{c:0{width}d}", utts))
    truth = {"shared_codes": z, "specific_codes": spec_codes, "shared_maps": A, "specific_maps": B}
    return ConversationSet(tuple(convs), k, d, tuple(f"class{c}" for c in range(k)), ground_truth=truth)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, ...]:
    """Floor every ratio, then give the leftover conversations to the first split."""
    if len(ratios) != 3:
        raise ValueError(f"expected (train, valid, test) ratios, got {ratios}")
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    sizes = [math.floor(n * r + 1e-9) for r in ratios]
    sizes[0] += n - sum(sizes)
    for r, s, name in zip(ratios, sizes, ("train", "valid", "test")):
        if r > 0 and s == 0:
            raise ValueError(f"{name} ratio {r} gives zero of {n} conversations")
    return tuple(sizes)


def split(dataset: ConversationSet, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle at conversation granularity -> (train, valid, test)."""
    n_train, n_valid, _ = split_sizes(len(dataset), ratios)
    order = stream(seed, "split").permutation(len(dataset))
    return (dataset.subset(order[:n_train]),
            dataset.subset(order[n_train:n_train + n_valid]),
            dataset.subset(order[n_train + n_valid:]))
