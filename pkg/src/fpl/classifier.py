"""Per-class probabilities, fusion and training losses.

Two scalars are learnable: mu (ridge strength is exp(mu)) and epsilon
(temperature on negative reconstruction distances).  Zero-shot scores
come from cosine similarity between a query's global image feature and
per-class text features; the fused prediction is a renormalized
residual mixture of the two probability vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateReconstruction,
    EmptyBatch,
    LabelOutOfRange,
    NegativeEta,
    ShapeMismatch,
    ZeroVector,
)
from .tensorcore import Matrix, as_matrix

_PROB_CLAMP = 1e-12
_EPSILON_FLOOR = 1e-6
_UNIT_ROW_TOL = 1e-4


@dataclass
class FplParams:
    """The two trainable scalars: mu (delta = exp(mu)) and epsilon."""

    mu: float = 0.0
    epsilon: float = 1.0

    @property
    def delta(self) -> float:
        return float(np.exp(self.mu))

    def clamp(self) -> None:
        """Keep epsilon strictly positive after an optimizer step."""
        if self.epsilon < _EPSILON_FLOOR:
            self.epsilon = _EPSILON_FLOOR

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu, self.epsilon], dtype=np.float64)


@dataclass(frozen=True)
class TextFeatureBank:
    """L2-normalized per-class text features plus the zero-shot temperature."""

    class_names: tuple
    features: Matrix
    tau: float

    def __post_init__(self):
        features = as_matrix(self.features, "TextFeatureBank.features")
        names = tuple(self.class_names)
        if len(names) < 2:
            raise ShapeMismatch("TextFeatureBank: need at least 2 classes")
        if features.shape[0] != len(names):
            raise ShapeMismatch(
                f"TextFeatureBank: {features.shape[0]} feature rows for "
                f"{len(names)} class names"
            )
        norms = np.linalg.norm(features, axis=1)
        if not np.all(np.abs(norms - 1.0) <= _UNIT_ROW_TOL):
            raise ShapeMismatch("TextFeatureBank: feature rows must be unit norm")
        if not self.tau > 0.0:
            raise ShapeMismatch("TextFeatureBank: tau must be > 0")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "features", features)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class HyperParams:
    """Training and fusion hyperparameters; defaults are the standard
    protocol (20 epochs at lr 1e-3, gamma 0.1, eta 1.0, batch 64)."""

    eta: float = 1.0
    gamma: float = 0.1
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    po_doubled: bool = False
    leave_self_out: bool = True

    def __post_init__(self):
        if self.eta < 0.0:
            raise NegativeEta(f"HyperParams: eta must be >= 0, got {self.eta}")
        if self.gamma < 0.0 or self.lr < 0.0 or self.weight_decay < 0.0:
            raise ShapeMismatch("HyperParams: gamma, lr, weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ShapeMismatch("HyperParams: epochs >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class Prediction:
    """Per-query probability vectors and the fused argmax."""

    p_clip: np.ndarray
    p_r: np.ndarray
    p_total: np.ndarray
    argmax: int


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _distances(reconstructions) -> np.ndarray:
    if isinstance(reconstructions, np.ndarray):
        return np.asarray(reconstructions, dtype=np.float64)
    return np.array([r.distance for r in reconstructions], dtype=np.float64)


def projection_scores(reconstructions, epsilon: float) -> np.ndarray:
    """Softmax over -epsilon * distance, one entry per class.

    Accepts a list of Reconstruction objects or a raw distance vector.
    """
    d = _distances(reconstructions)
    if d.shape[-1] < 2:
        raise ShapeMismatch("projection_scores: need at least 2 classes")
    if not epsilon > 0.0:
        raise ShapeMismatch("projection_scores: epsilon must be > 0")
    return softmax(-epsilon * d)


def clip_scores(image_feature, bank: TextFeatureBank) -> np.ndarray:
    """Zero-shot probabilities: softmax of cosine(image, text) / tau."""
    f = np.asarray(image_feature, dtype=np.float64).ravel()
    if f.shape[0] != bank.features.shape[1]:
        raise ShapeMismatch(
            f"clip_scores: image feature dim {f.shape[0]} vs text dim "
            f"{bank.features.shape[1]}"
        )
    norm = float(np.linalg.norm(f))
    if norm < 1e-12:
        raise ZeroVector("clip_scores: degenerate image feature")
    sims = bank.features @ (f / norm)
    return softmax(sims / bank.tau)


def fuse(p_clip, p_r, eta: float) -> np.ndarray:
    """Residual mixture (p_clip + eta * p_r) / (1 + eta).

    The renormalization keeps a proper probability vector and never
    changes the argmax of the unnormalized sum.
    """
    if eta < 0.0:
        raise NegativeEta(f"fuse: eta must be >= 0, got {eta}")
    p_clip = np.asarray(p_clip, dtype=np.float64)
    p_r = np.asarray(p_r, dtype=np.float64)
    if p_clip.shape != p_r.shape:
        raise ShapeMismatch(f"fuse: shapes {p_clip.shape} vs {p_r.shape}")
    return (p_clip + eta * p_r) / (1.0 + eta)


def ce_loss(p_total, label: int) -> float:
    """Cross-entropy -log p[label], with the input clamped at 1e-12."""
    p = np.asarray(p_total, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise LabelOutOfRange(f"ce_loss: label {label} for {p.shape[-1]} classes")
    return float(-np.log(max(float(p[label]), _PROB_CLAMP)))


def po_loss(reconstructions, doubled: bool = False) -> float:
    """Mean absolute pairwise cosine between flattened reconstructions.

    Implements the literal 1/(D*(D-1)) prefactor over the sum with
    i < j, so the value lives in [0, 0.5]; ``doubled`` switches to the
    2/(D*(D-1)) variant whose maximum is 1.
    """
    flats = [np.asarray(r.reconstructed, dtype=np.float64).ravel() for r in reconstructions]
    d = len(flats)
    if d < 2:
        raise ShapeMismatch("po_loss: need at least 2 classes")
    norms = [float(np.linalg.norm(f)) for f in flats]
    for i, n in enumerate(norms):
        if n < 1e-12:
            raise DegenerateReconstruction(
                f"po_loss: reconstruction {i} has near-zero norm"
            )
    total = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            total += abs(float(np.dot(flats[i], flats[j])) / (norms[i] * norms[j]))
    value = total / (d * (d - 1))
    return 2.0 * value if doubled else value


def fused_ce_grads(p_clip, distances, ddist_dmu, label, epsilon, eta):
    """Cross-entropy of the fused prediction plus d/dmu and d/depsilon.

    ``distances`` and ``ddist_dmu`` are per-class vectors for one query;
    p_clip is constant with respect to both parameters.
    """
    d = np.asarray(distances, dtype=np.float64)
    g = np.asarray(ddist_dmu, dtype=np.float64)
    s = softmax(-epsilon * d)
    p_tot = (np.asarray(p_clip, dtype=np.float64) + eta * s) / (1.0 + eta)
    p_y = float(p_tot[label])
    loss = -np.log(max(p_y, _PROB_CLAMP))
    if p_y <= _PROB_CLAMP:
        return float(loss), 0.0, 0.0, p_tot
    mix = eta / (1.0 + eta)
    s_y = float(s[label])
    # d s_y / d epsilon = s_y * (sum_k s_k d_k - d_y)
    ds_deps = s_y * (float(np.dot(s, d)) - float(d[label]))
    # d s_y / d mu = epsilon * s_y * (sum_k s_k g_k - g_y)
    ds_dmu = epsilon * s_y * (float(np.dot(s, g)) - float(g[label]))
    dloss_deps = -(mix / p_y) * ds_deps
    dloss_dmu = -(mix / p_y) * ds_dmu
    return float(loss), float(dloss_dmu), float(dloss_deps), p_tot


def predict(query, pools, bank: TextFeatureBank, image_feature,
            params: FplParams, hp: HyperParams) -> Prediction:
    """Single-query inference: zero-shot, projection and fused scores."""
    from .projection import reconstruct_all

    recs = reconstruct_all(query, pools, params.delta)
    p_r = projection_scores(recs, params.epsilon)
    p_clip = clip_scores(image_feature, bank)
    p_total = fuse(p_clip, p_r, hp.eta)
    return Prediction(p_clip=p_clip, p_r=p_r, p_total=p_total,
                      argmax=int(np.argmax(p_total)))


def total_loss_and_grads(batch, pools, bank: TextFeatureBank, image_features,
                         params: FplParams, hp: HyperParams):
    """Batch loss (mean CE of fused predictions + gamma * mean PO) and
    its analytic partial derivatives with respect to mu and epsilon.

    ``batch`` is a list of (FeatureMap, label) pairs; ``image_features``
    holds one global feature vector per query, aligned with the batch.
    """
    from .engine import EpisodeEngine  # deferred: engine imports this module

    batch = list(batch)
    if not batch:
        raise EmptyBatch("total_loss_and_grads: empty batch")
    if len(image_features) != len(batch):
        raise ShapeMismatch("total_loss_and_grads: one image feature per query")
    maps = [q for q, _ in batch]
    labels = np.array([lab for _, lab in batch], dtype=np.int64)
    num_classes = len(pools)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelOutOfRange("total_loss_and_grads: label outside class range")
    clip_probs = np.stack([clip_scores(f, bank) for f in image_features])
    engine = EpisodeEngine(pools, maps)
    loss, dmu, deps, _ = engine.loss_and_grads(
        np.arange(len(batch)), labels, clip_probs, params.mu, params.epsilon, hp
    )
    return loss, dmu, deps
