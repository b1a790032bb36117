"""Analytic reverse-mode gradients of the total loss, and their verifier.

The computation graph is small and fixed, so the chain rule is written out
by hand: interpolation -> text augmentation -> similarity -> column softmax
-> mask composition -> per-pixel normalization -> the five loss terms, plus
the sigmoid branch of the negative mask. ``finite_diff`` re-evaluates the
loss with central differences and is the contract ``backward`` is checked
against.

Only (t_per, w_z, w_m, b_m) receive gradients; every frozen tensor is left
untouched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvariantError, NonFiniteError
from .head import PersonalState, build_forward
from .losses import DICE_EPS, PROB_CLAMP, LossBreakdown, LossWeights, total_loss
from .snapshot import FrozenSnapshot


@dataclass
class Gradients:
    g_t_per: np.ndarray
    g_w_z: np.ndarray
    g_w_m: np.ndarray
    g_b_m: float


def _check(stage: str, *arrays) -> None:
    for arr in arrays:
        if arr is not None and not np.isfinite(arr).all():
            raise NonFiniteError(stage)


def backward(snapshot: FrozenSnapshot, state: PersonalState, gt: np.ndarray,
             weights: LossWeights) -> tuple[LossBreakdown, Gradients]:
    """Forward pass plus exact gradients of the weighted total loss."""
    if snapshot.num_proposals != state.w_z.shape[0]:
        # Bank-tiled (concatenated) snapshots are evaluation-only.
        raise InvariantError("backward requires the state's native proposal count")
    cache = build_forward(snapshot, state)
    _check("forward", cache.s, cache.c, cache.p, cache.q)
    breakdown = total_loss(cache, gt, weights)
    _check("loss", np.array([breakdown.total]))

    g = gt.astype(np.float64)
    fg = g > 0
    n_fg = float(g.sum())
    n_pix = g.size
    q_per = cache.q[..., cache.k]

    # d total / d q_per, accumulated over dice, bce and cls.
    gq_per = np.zeros_like(q_per)
    if weights.dice:
        inter = float((q_per * g).sum())
        denom = float(q_per.sum()) + float(g.sum()) + DICE_EPS
        gq_per += weights.dice * ((2.0 * inter + DICE_EPS) / denom ** 2
                                  - 2.0 * g / denom)
    if weights.bce:
        inside = (q_per > PROB_CLAMP) & (q_per < 1.0 - PROB_CLAMP)
        qc = np.clip(q_per, PROB_CLAMP, 1.0 - PROB_CLAMP)
        gq_per += weights.bce * inside * (-g / qc + (1.0 - g) / (1.0 - qc)) / n_pix
    if weights.cls and n_fg > 0:
        inside = q_per > PROB_CLAMP
        qc = np.clip(q_per, PROB_CLAMP, 1.0)
        gq_per += weights.cls * inside * (-g / qc) / n_fg
    _check("loss-to-q", gq_per)

    # Per-pixel normalization Q = P / coverage (uniform fallback has no grad).
    covered = cache.coverage > 1e-12
    gp = np.zeros_like(cache.p)
    scale = np.where(covered, gq_per / np.where(covered, cache.coverage, 1.0), 0.0)
    gp[..., cache.k] = scale
    gp -= (scale * q_per)[..., None]
    _check("normalize", gp)

    # Composition P = M C^T.
    flat_gp = gp.reshape(-1, gp.shape[2])
    flat_m = cache.m.reshape(-1, cache.m.shape[2])
    gc = flat_gp.T @ flat_m
    gm = gp @ cache.c

    # Negative-column uniformity loss feeds C directly.
    if cache.j is not None and weights.neg_z:
        col = cache.c[:, cache.j]
        v_np = col.shape[0] - 1
        inside = col > PROB_CLAMP
        contrib = np.where(inside, -1.0 / (v_np * np.clip(col, PROB_CLAMP, 1.0)), 0.0)
        contrib[cache.k] = 0.0
        gc[:, cache.j] += weights.neg_z * contrib
    _check("composition", gc, gm)

    # Column softmax.
    colsum = (gc * cache.c).sum(axis=0, keepdims=True)
    gs = cache.c * (gc - colsum)

    # Similarity S = tau T Z^T.
    gt_full = snapshot.logit_scale * (gs @ cache.z_full)
    gz_full = snapshot.logit_scale * (gs.T @ cache.t_full)
    _check("similarity", gt_full, gz_full)

    g_t_per = (1.0 - state.alpha) * gt_full[state.k]

    if cache.j is not None:
        g_w_z = snapshot.z_open @ gz_full[cache.j]
        gm_neg = gm[..., cache.j].copy()
        if weights.neg_m:
            comp = 1.0 - g
            inside = (cache.m_neg > PROB_CLAMP) & (cache.m_neg < 1.0 - PROB_CLAMP)
            mc = np.clip(cache.m_neg, PROB_CLAMP, 1.0 - PROB_CLAMP)
            gm_neg += weights.neg_m * inside * (-comp / mc + (1.0 - comp) / (1.0 - mc)) / n_pix
        ga = gm_neg * cache.m_neg * (1.0 - cache.m_neg)
        g_w_m = np.tensordot(ga, snapshot.m_open, axes=([0, 1], [0, 1]))
        g_b_m = float(ga.sum())
    else:
        g_w_z = np.zeros_like(state.w_z)
        g_w_m = np.zeros_like(state.w_m)
        g_b_m = 0.0
    _check("negative-branch", g_t_per, g_w_z, g_w_m, np.array([g_b_m]))

    return breakdown, Gradients(g_t_per=g_t_per, g_w_z=g_w_z, g_w_m=g_w_m,
                                g_b_m=g_b_m)


def _loss_at(snapshot: FrozenSnapshot, state: PersonalState, gt: np.ndarray,
             weights: LossWeights) -> float:
    return total_loss(build_forward(snapshot, state), gt, weights).total


def finite_diff(snapshot: FrozenSnapshot, state: PersonalState, gt: np.ndarray,
                weights: LossWeights, eps: float = 1e-4) -> Gradients:
    """Central-difference gradients, one coordinate at a time."""

    def probe(**kw) -> float:
        return _loss_at(snapshot, replace(state, **kw), gt, weights)

    def central(base: np.ndarray, key: str) -> np.ndarray:
        out = np.zeros_like(base)
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[i] = base.reshape(-1)[i] + eps
            hi = probe(**{key: shifted.reshape(base.shape)})
            shifted[i] = base.reshape(-1)[i] - eps
            lo = probe(**{key: shifted.reshape(base.shape)})
            out.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
        return out

    g_b = (probe(b_m=state.b_m + eps) - probe(b_m=state.b_m - eps)) / (2.0 * eps)
    return Gradients(g_t_per=central(state.t_per, "t_per"),
                     g_w_z=central(state.w_z, "w_z"),
                     g_w_m=central(state.w_m, "w_m"),
                     g_b_m=float(g_b))


def relative_errors(analytic: Gradients, numeric: Gradients) -> dict[str, float]:
    """Per-parameter max of |a - f| / max(|a|, |f|, 1e-8)."""

    def err(a, f) -> float:
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        f = np.atleast_1d(np.asarray(f, dtype=np.float64))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        return float((np.abs(a - f) / denom).max())

    return {
        "t_per": err(analytic.g_t_per, numeric.g_t_per),
        "w_z": err(analytic.g_w_z, numeric.g_w_z),
        "w_m": err(analytic.g_w_m, numeric.g_w_m),
        "b_m": err(analytic.g_b_m, numeric.g_b_m),
    }


def random_instance(seed: int, v: int = 5, d: int = 8, n: int = 6,
                    h: int = 16, w: int = 16,
                    weights: LossWeights | None = None):
    """Seeded generic problem instance for gradient verification."""
    rng = np.random.default_rng(seed)
    snapshot = FrozenSnapshot(
        t_open=rng.normal(size=(v, d)) * 0.6,
        z_open=rng.normal(size=(n, d)) * 0.6,
        m_open=rng.uniform(0.02, 0.98, size=(h, w, n)),
        vocab_names=[f"class_{i:02d}" for i in range(v)],
        logit_scale=1.5,
    )
    gt = (rng.uniform(size=(h, w)) < 0.4).astype(np.uint8)
    gt[0, 0] = 1
    gt[-1, -1] = 0
    state = PersonalState(
        t_per=rng.normal(size=d) * 0.5,
        w_z=rng.normal(size=n) * 0.4,
        w_m=rng.normal(size=n) * 0.4,
        b_m=float(rng.normal()) * 0.3,
        k=v,
        alpha=0.25,
        f_per=rng.normal(size=d) * 0.5,
        negative_enabled=True,
    )
    return snapshot, state, gt, weights or LossWeights()


@dataclass
class GradcheckReport:
    seed: int
    eps: float
    tol: float
    errors: dict[str, float]
    elapsed_s: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def summary(self) -> str:
        detail = "  ".join(f"{k}={v:.3e}" for k, v in self.errors.items())
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck seed={self.seed} {status} "
                f"max_rel_err={self.max_error:.3e} tol={self.tol:.1e}  [{detail}]")


def gradcheck(seed: int = 0, eps: float = 1e-4, tol: float = 1e-5,
              v: int = 5, d: int = 8, n: int = 6, h: int = 16,
              w: int = 16) -> GradcheckReport:
    """Analytic vs central-difference gradients on a seeded instance."""
    start = time.perf_counter()
    snapshot, state, gt, weights = random_instance(seed, v=v, d=d, n=n, h=h, w=w)
    _, analytic = backward(snapshot, state, gt, weights)
    numeric = finite_diff(snapshot, state, gt, weights, eps=eps)
    errors = relative_errors(analytic, numeric)
    return GradcheckReport(seed=seed, eps=eps, tol=tol, errors=errors,
                           elapsed_s=time.perf_counter() - start)
