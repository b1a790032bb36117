"""Forward pipeline: personal text row, negative mask branch, composition.

The frozen model composes mask proposals with per-proposal class
probabilities: ``S = tau * T Z^T``, column softmax ``C``, then
``P(p, v) = sum_n M(p, n) C[v, n]``. Personalization appends one learnable
text row (index ``k = V``) and, when the negative branch is enabled, one
derived mask embedding ``z_neg = w_z Z_open`` (column ``j = N``) and one
derived mask channel ``m_neg = sigmoid(M_open w_m + b_m)``.

All functions are pure; a ForwardCache belongs to a single evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .snapshot import FrozenSnapshot

# Per-pixel mass below this uses the uniform-class fallback.
COVERAGE_EPS = 1e-12


@dataclass
class PersonalState:
    """Trainable personalization parameters plus frozen injection vector."""

    t_per: np.ndarray                 # (D,)
    w_z: np.ndarray                   # (N,)
    w_m: np.ndarray                   # (N,)
    b_m: float
    k: int                            # personal vocabulary index (= V)
    alpha: float = 0.0                # visual interpolation weight
    f_per: np.ndarray | None = None   # (D,) frozen masked visual embedding
    negative_enabled: bool = True

    def validate(self) -> None:
        if self.t_per.ndim != 1 or self.w_z.ndim != 1 or self.w_m.ndim != 1:
            raise InvariantError("state vectors must be 1-D")
        if self.w_z.shape != self.w_m.shape:
            raise InvariantError("w_z and w_m must have equal length")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvariantError(f"alpha {self.alpha} outside [0, 1]")
        if self.f_per is None and self.alpha != 0.0:
            raise InvariantError("alpha must be 0 without a visual embedding")
        if self.f_per is not None and self.f_per.shape != self.t_per.shape:
            raise InvariantError("f_per dimension differs from t_per")

    def num_trainable(self) -> int:
        return self.t_per.size + self.w_z.size + self.w_m.size + 1


@dataclass
class ForwardCache:
    """All intermediates of one forward pass, consumed by losses and grads."""

    t_full: np.ndarray               # (V+1, D) or (V, D) frozen
    z_full: np.ndarray               # (N+1, D) or (N, D)
    s: np.ndarray                    # similarity logits
    c: np.ndarray                    # column-stochastic class probabilities
    m: np.ndarray                    # (H, W, channels)
    m_neg: np.ndarray | None         # (H, W) negative mask, None if disabled
    m_neg_logits: np.ndarray | None  # pre-sigmoid activations
    p: np.ndarray                    # (H, W, classes) composed scores
    q: np.ndarray                    # (H, W, classes) per-pixel normalized
    coverage: np.ndarray             # (H, W) per-pixel mass sum_v P(p, v)
    k: int | None                    # personal class index, None for frozen
    j: int | None                    # negative column/channel index


def effective_embedding(t_per: np.ndarray, f_per: np.ndarray | None,
                        alpha: float) -> np.ndarray:
    """Interpolate the visual embedding into the personal text embedding."""
    if not 0.0 <= alpha <= 1.0:
        raise InvariantError(f"alpha {alpha} outside [0, 1]")
    if f_per is None:
        if alpha != 0.0:
            raise InvariantError("alpha must be 0 without a visual embedding")
        return t_per.copy()
    if f_per.shape != t_per.shape:
        raise InvariantError("f_per dimension differs from t_per")
    if alpha == 0.0:
        return t_per.copy()
    if alpha == 1.0:
        return f_per.copy()
    return alpha * f_per + (1.0 - alpha) * t_per


def augment_text(t_open: np.ndarray, t_eff: np.ndarray, k: int) -> np.ndarray:
    """Append the personal embedding as row ``k``; refuses re-augmentation."""
    if t_open.ndim != 2 or t_eff.ndim != 1 or t_open.shape[1] != t_eff.shape[0]:
        raise InvariantError("text bank and personal embedding dims disagree")
    if t_open.shape[0] != k:
        raise InvariantError(
            f"text bank has {t_open.shape[0]} rows; personal row must land at {k} "
            "(already augmented?)")
    return np.vstack([t_open, t_eff[None, :]])


def negative_embedding(z_open: np.ndarray, w_z: np.ndarray) -> np.ndarray:
    """Linear combination of the mask embeddings: ``w_z @ z_open``."""
    if z_open.shape[0] != w_z.shape[0]:
        raise InvariantError(
            f"w_z length {w_z.shape[0]} != {z_open.shape[0]} proposals")
    return w_z @ z_open


def negative_mask(m_open: np.ndarray, w_m: np.ndarray,
                  b_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid of a 1x1 combination over proposal channels.

    Returns (mask, pre-sigmoid logits); the logits feed the backward pass.
    """
    if m_open.shape[2] != w_m.shape[0]:
        raise InvariantError(
            f"w_m length {w_m.shape[0]} != {m_open.shape[2]} proposals")
    logits = m_open @ w_m + b_m
    return sigmoid(logits), logits


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def similarity(t_full: np.ndarray, z_full: np.ndarray, logit_scale: float) -> np.ndarray:
    if t_full.shape[1] != z_full.shape[1]:
        raise InvariantError("text and mask embedding dims disagree")
    return logit_scale * (t_full @ z_full.T)


def class_probs(s: np.ndarray) -> np.ndarray:
    """Per-column softmax with max subtraction."""
    shifted = s - s.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def predict(m: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compose masks with class probabilities and normalize per pixel.

    Returns (p, q, coverage). Pixels whose total mass is at most
    COVERAGE_EPS get a uniform class distribution.
    """
    if m.shape[2] != c.shape[1]:
        raise InvariantError(
            f"{m.shape[2]} mask channels vs {c.shape[1]} probability columns")
    p = m @ c.T
    coverage = p.sum(axis=2)
    covered = coverage > COVERAGE_EPS
    q = np.full_like(p, 1.0 / p.shape[2])
    q[covered] = p[covered] / coverage[covered][:, None]
    return p, q, coverage


def label_map(q: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties break to the smallest class index."""
    return q.argmax(axis=2)


def _tile_bank_weights(w: np.ndarray, num: int, native: int) -> np.ndarray:
    """Repeat per-proposal weights across merged proposal banks."""
    if num == native:
        return w
    if num % native:
        raise InvariantError(
            f"snapshot has {num} proposals, state expects a multiple of {native}")
    return np.tile(w, num // native)


def build_forward(snapshot: FrozenSnapshot, state: PersonalState) -> ForwardCache:
    """Run the personalized pipeline for one snapshot.

    Concatenated evaluation snapshots carry an integer multiple of the
    trained proposal count; the negative-branch weights are then tiled
    bank-wise (and the embedding combination averaged over banks).
    """
    state.validate()
    if state.t_per.shape[0] != snapshot.embed_dim:
        raise InvariantError(
            f"state dim {state.t_per.shape[0]} != snapshot dim {snapshot.embed_dim}")
    if state.k != snapshot.vocab_size:
        raise InvariantError(
            f"personal index {state.k} != vocabulary size {snapshot.vocab_size}")
    n = snapshot.num_proposals
    t_eff = effective_embedding(state.t_per, state.f_per, state.alpha)
    t_full = augment_text(snapshot.t_open, t_eff, state.k)

    if state.negative_enabled:
        w_z = _tile_bank_weights(state.w_z, n, state.w_z.shape[0])
        w_m = _tile_bank_weights(state.w_m, n, state.w_m.shape[0])
        banks = n // state.w_z.shape[0]
        z_neg = negative_embedding(snapshot.z_open, w_z) / banks
        z_full = np.vstack([snapshot.z_open, z_neg[None, :]])
        m_neg, m_neg_logits = negative_mask(snapshot.m_open, w_m, state.b_m)
        m = np.concatenate([snapshot.m_open, m_neg[:, :, None]], axis=2)
        j = n
    else:
        z_full = snapshot.z_open
        m = snapshot.m_open
        m_neg = m_neg_logits = None
        j = None

    s = similarity(t_full, z_full, snapshot.logit_scale)
    c = class_probs(s)
    p, q, coverage = predict(m, c)
    return ForwardCache(t_full=t_full, z_full=z_full, s=s, c=c, m=m,
                        m_neg=m_neg, m_neg_logits=m_neg_logits, p=p, q=q,
                        coverage=coverage, k=state.k, j=j)


def build_frozen_forward(snapshot: FrozenSnapshot) -> ForwardCache:
    """Run the unmodified pipeline (no personal row, no negative branch)."""
    s = similarity(snapshot.t_open, snapshot.z_open, snapshot.logit_scale)
    c = class_probs(s)
    p, q, coverage = predict(snapshot.m_open, c)
    return ForwardCache(t_full=snapshot.t_open, z_full=snapshot.z_open, s=s,
                        c=c, m=snapshot.m_open, m_neg=None, m_neg_logits=None,
                        p=p, q=q, coverage=coverage, k=None, j=None)
