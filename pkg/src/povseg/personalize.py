"""Few-shot personalization: init, visual embedding, descent loop, state I/O.

Training is plain fixed-step gradient descent at batch size 1, cycling
through the K training samples in manifest order. There is no shuffling and
no adaptive optimizer, so a run is a pure function of its inputs and every
rerun reproduces the same trajectory bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    InvariantError,
    NonFiniteError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .grad import backward
from .head import PersonalState
from .losses import LossWeights
from .snapshot import FrozenSnapshot, downsample_mask

STATE_MAGIC = b"POVP"
STATE_VERSION = 1
_SFLAG_VISUAL = 0x01
_SFLAG_NEGATIVE = 0x02
_STATE_HEADER = struct.Struct("<4sBB2IdI")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    iterations: int = 200
    alpha: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    injection_enabled: bool = True
    negative_enabled: bool = True

    def validate(self) -> None:
        if self.iterations < 1:
            raise InvariantError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise InvariantError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvariantError(f"alpha {self.alpha} outside [0, 1]")
        self.weights.validate()


def init_state(snapshot: FrozenSnapshot, init_vector: np.ndarray,
               config: TrainConfig) -> PersonalState:
    """Fresh state: personal embedding from the given vector, zeros elsewhere."""
    if init_vector.shape != (snapshot.embed_dim,):
        raise InvariantError(
            f"init vector shape {init_vector.shape} != ({snapshot.embed_dim},)")
    n = snapshot.num_proposals
    return PersonalState(t_per=init_vector.astype(np.float64).copy(),
                         w_z=np.zeros(n), w_m=np.zeros(n), b_m=0.0,
                         k=snapshot.vocab_size, alpha=0.0, f_per=None,
                         negative_enabled=config.negative_enabled)


def compute_visual_embedding(samples: list[tuple[FrozenSnapshot, np.ndarray]]) -> np.ndarray:
    """Masked average of each feature map, averaged over samples.

    The mean vector is L2-normalized and rescaled to the mean text-row norm
    so the interpolation mixes commensurate magnitudes.
    """
    if not samples:
        raise InvariantError("no samples for the visual embedding")
    per_sample = []
    for idx, (snapshot, mask) in enumerate(samples):
        if snapshot.features is None:
            raise InvariantError(f"sample {idx} has no feature map")
        hf, wf, _ = snapshot.features.shape
        small = downsample_mask(mask, hf, wf).astype(bool)
        if not small.any():
            raise InvariantError(
                f"sample {idx}: mask has no foreground at feature resolution")
        per_sample.append(snapshot.features[small].mean(axis=0))
    pooled = np.mean(per_sample, axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise InvariantError("masked visual embedding is the zero vector")
    target = float(np.linalg.norm(samples[0][0].t_open, axis=1).mean())
    return pooled / norm * target


def run_personalization(samples: list[tuple[FrozenSnapshot, np.ndarray]],
                        config: TrainConfig,
                        init_vector: np.ndarray | None = None
                        ) -> tuple[PersonalState, list[float]]:
    """Gradient-descend the personal parameters over K training samples.

    ``init_vector`` defaults to the centroid of the first snapshot's text
    bank. Returns the final state and the per-step total-loss trace.
    """
    config.validate()
    if not samples:
        raise InvariantError("empty training sample set")
    first = samples[0][0]
    for idx, (snap, mask) in enumerate(samples):
        if (snap.vocab_size, snap.embed_dim, snap.num_proposals) != (
                first.vocab_size, first.embed_dim, first.num_proposals):
            raise InvariantError(f"sample {idx} disagrees on (V, D, N)")
        if mask.shape != snap.grid_shape:
            raise InvariantError(f"sample {idx}: mask shape {mask.shape} "
                                 f"!= grid {snap.grid_shape}")

    if init_vector is None:
        init_vector = first.t_open.mean(axis=0)
    state = init_state(first, init_vector, config)
    if config.injection_enabled:
        state.f_per = compute_visual_embedding(samples)
        state.alpha = config.alpha

    trace: list[float] = []
    lr = config.learning_rate
    for step in range(config.iterations):
        snapshot, mask = samples[step % len(samples)]
        try:
            breakdown, grads = backward(snapshot, state, mask, config.weights)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.stage, f"step {step}: {exc}") from exc
        if not np.isfinite(breakdown.total):
            raise NonFiniteError("loss", f"non-finite total loss at step {step}")
        trace.append(breakdown.total)
        state.t_per = state.t_per - lr * grads.g_t_per
        state.w_z = state.w_z - lr * grads.g_w_z
        state.w_m = state.w_m - lr * grads.g_w_m
        state.b_m = state.b_m - lr * grads.g_b_m
    return state, trace


def save_state(state: PersonalState, path: str | Path) -> None:
    """Write a POVP state file (binary64 payload, little endian)."""
    state.validate()
    flags = 0
    if state.f_per is not None:
        flags |= _SFLAG_VISUAL
    if state.negative_enabled:
        flags |= _SFLAG_NEGATIVE
    d, n = state.t_per.shape[0], state.w_z.shape[0]
    parts = [_STATE_HEADER.pack(STATE_MAGIC, STATE_VERSION, flags, d, n,
                                float(state.alpha), state.k)]
    for arr in (state.t_per, state.w_z, state.w_m):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", float(state.b_m)))
    if state.f_per is not None:
        parts.append(np.ascontiguousarray(state.f_per, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_state(path: str | Path) -> PersonalState:
    path = Path(path)
    data = path.read_bytes()

    def take(off: int, count: int) -> bytes:
        if off + count > len(data):
            raise TruncatedPayloadError(f"{path}: truncated at offset {off}")
        return data[off:off + count]

    magic, version, flags, d, n, alpha, k = _STATE_HEADER.unpack(
        take(0, _STATE_HEADER.size))
    if magic != STATE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != STATE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {STATE_VERSION}")
    off = _STATE_HEADER.size

    def array(count: int) -> np.ndarray:
        nonlocal off
        out = np.frombuffer(take(off, 8 * count), dtype="<f8").astype(np.float64)
        off += 8 * count
        return out

    t_per = array(d)
    w_z = array(n)
    w_m = array(n)
    b_m = float(array(1)[0])
    f_per = array(d) if flags & _SFLAG_VISUAL else None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    state = PersonalState(t_per=t_per, w_z=w_z, w_m=w_m, b_m=b_m, k=k,
                          alpha=alpha, f_per=f_per,
                          negative_enabled=bool(flags & _SFLAG_NEGATIVE))
    state.validate()
    return state


def check_state_matches(state: PersonalState, snapshot: FrozenSnapshot) -> None:
    """Validate a loaded state against the snapshot it will be applied to."""
    if state.t_per.shape[0] != snapshot.embed_dim:
        raise InvariantError(
            f"state dim {state.t_per.shape[0]} != snapshot dim {snapshot.embed_dim}")
    if state.k != snapshot.vocab_size:
        raise InvariantError(
            f"state personal index {state.k} != vocabulary size {snapshot.vocab_size}")
    n, native = snapshot.num_proposals, state.w_z.shape[0]
    if n % native:
        raise InvariantError(
            f"snapshot proposal count {n} is not a multiple of the state's {native}")
