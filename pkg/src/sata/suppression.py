"""Divide attention rows into trivial / non-trivial weights and suppress the trivial ones.

A weight is trivial when it is at or below the row threshold: ``t * row_max``
(relative mode) or ``t`` (absolute mode). Trivial weights are then replaced by

    x_j' = s * x_j**2 / sum_{i trivial} x_i

which bounds their total by ``s * row_max`` and, for ``s <= 1``, never
increases any single weight. Non-trivial weights pass through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, apply_op, as_tensor, div, tsum
from .errors import ConfigError, ParameterError

RELATIVE = "relative"
ABSOLUTE = "absolute"


@dataclass(frozen=True)
class SataConfig:
    """Settings for one suppression pass.

    ``s`` is the fixed scale, or the initial value when ``learnable_s`` is
    set (one scalar per transformer layer). Learnable scales are left
    unconstrained unless ``clamp_s`` asks the optimizer to keep them >= 0.
    """

    mode: str = RELATIVE
    t: float = 0.1
    s: float = 0.5
    learnable_s: bool = True
    renormalize_rows: bool = False
    epsilon: float = 1e-12
    clamp_s: bool = False

    def __post_init__(self):
        if self.mode not in (RELATIVE, ABSOLUTE):
            raise ConfigError(f"threshold mode must be 'relative' or 'absolute', got {self.mode!r}")
        if not self.t >= 0:
            raise ConfigError(f"threshold coefficient t must be >= 0, got {self.t}")
        if self.mode == RELATIVE and self.t >= 1:
            raise ConfigError(f"relative threshold needs t < 1 (t >= 1 masks the row maximum), got {self.t}")
        if not self.s >= 0:
            raise ConfigError(f"suppression scale s must start >= 0, got {self.s}")
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")


def _values(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def row_threshold(A, cfg: SataConfig) -> np.ndarray:
    """Per-row threshold with a trailing singleton axis for broadcasting."""
    a = _values(A)
    if cfg.mode == RELATIVE:
        return cfg.t * a.max(axis=-1, keepdims=True)
    return np.full(a.shape[:-1] + (1,), float(cfg.t))


def trivial_mask(A, cfg: SataConfig) -> np.ndarray:
    """Boolean mask, True where ``A <= threshold``. Carries no gradient."""
    if cfg.mode == RELATIVE and cfg.t >= 1:
        raise ConfigError(f"relative threshold needs t < 1, got {cfg.t}")
    a = _values(A)
    return a <= row_threshold(a, cfg)


def twist(A, M, s, *, renormalize_rows: bool = False, epsilon: float = 1e-12) -> Tensor:
    """Apply the trivial-weight transform row by row along the last axis.

    ``M`` is held constant; gradients flow to ``A`` (numerator and
    denominator) and to ``s`` when it is a Tensor. Non-trivial entries are
    copied through bit for bit.
    """
    A = as_tensor(A)
    s = as_tensor(s)
    m = np.asarray(M, dtype=bool)
    if m.shape != A.shape:
        raise ParameterError(f"mask shape {m.shape} does not match attention shape {A.shape}")
    a = A.data
    trivial = np.where(m, a, 0.0)
    denom = trivial.sum(axis=-1, keepdims=True) + epsilon
    out = np.where(m, s.data * (trivial * trivial / denom), a)
    del trivial

    def bw(g):
        trivial = np.where(m, a, 0.0)
        ratio = trivial * trivial / denom
        gt = np.where(m, g, 0.0)
        ga = gs = None
        if A.requires_grad:
            # d/da_j of s a_j^2 / S, plus the shared denominator term, on trivial entries only
            cross = (gt * ratio).sum(axis=-1, keepdims=True) / denom
            ga = np.where(m, s.data * (2.0 * trivial * gt / denom - cross), g)
        if s.requires_grad:
            gs = np.sum(gt * ratio).reshape(s.shape) if s.ndim == 0 else _sum_to(gt * ratio, s.shape)
        return ga, gs

    out_t = apply_op("twist", (A, s), out, bw)
    if renormalize_rows:
        out_t = div(out_t, tsum(out_t, axis=-1, keepdims=True))
    return out_t


def _sum_to(x: np.ndarray, shape) -> np.ndarray:
    while x.ndim > len(shape):
        x = x.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and x.shape[axis] != 1:
            x = x.sum(axis=axis, keepdims=True)
    return x


def suppress(A, cfg: SataConfig, s=None) -> tuple[Tensor, np.ndarray]:
    """Mask then twist; returns the new weights and the mask used."""
    M = trivial_mask(A, cfg)
    scale = cfg.s if s is None else s
    return twist(A, M, scale, renormalize_rows=cfg.renormalize_rows, epsilon=cfg.epsilon), M


@dataclass
class BoundReport:
    trivial_sum_after: np.ndarray
    bound: np.ndarray
    elementwise_nonincrease: np.ndarray | None
    row_pass: np.ndarray
    passed: bool


def verify_mass_bound(A, M, s, out=None, *, epsilon: float = 1e-12) -> BoundReport:
    """Check the trivial-mass bound and (for ``s <= 1``) elementwise non-increase.

    ``out`` defaults to ``twist(A, M, s)``. The bound is checked in the
    magnitude form ``|sum trivial'| <= |s| * row_max``, which is the stated
    bound for ``s >= 0`` and stays valid if a learned scale turns negative.
    """
    a = _values(A)
    m = np.asarray(M, dtype=bool)
    s_val = float(np.asarray(_values(s)).reshape(-1)[0])
    if out is None:
        out = twist(Tensor(a), m, s_val, epsilon=epsilon)
    o = _values(out)
    trivial_after = np.where(m, o, 0.0).sum(axis=-1)
    bound = abs(s_val) * a.max(axis=-1)
    ok = np.abs(trivial_after) <= bound + 1e-12
    nonincrease = None
    if 0 <= s_val <= 1:
        nonincrease = np.all(np.where(m, o <= a + 1e-15, True), axis=-1)
        ok = ok & nonincrease
    return BoundReport(trivial_after, bound, nonincrease, ok, bool(np.all(ok)))


@dataclass
class AttentionStats:
    """Histogram and sub-threshold statistics for a stack of attention rows.

    Bin ``k`` covers ``[k * bin_width, (k + 1) * bin_width)``. ``row_*``
    arrays are indexed like the leading axes of the input.
    """

    bin_width: float
    threshold: float
    bin_edges: np.ndarray
    row_counts: np.ndarray  # (..., bins)
    row_mass: np.ndarray  # (..., bins)
    trivial_count: np.ndarray
    trivial_mass: np.ndarray
    row_max: np.ndarray
    row_total: np.ndarray
    counts: np.ndarray = field(init=False)
    mass: np.ndarray = field(init=False)

    def __post_init__(self):
        lead = tuple(range(self.row_counts.ndim - 1))
        self.counts = self.row_counts.sum(axis=lead) if lead else self.row_counts.copy()
        self.mass = self.row_mass.sum(axis=lead) if lead else self.row_mass.copy()

    @property
    def num_bins(self) -> int:
        return len(self.bin_edges) - 1

    def histogram_mass_below(self, threshold: float | None = None) -> np.ndarray:
        """Per-row mass of the bins lying entirely at or below ``threshold``."""
        threshold = self.threshold if threshold is None else threshold
        upper = self.bin_edges[1:]
        full = upper <= threshold * (1 + 1e-12)
        return (self.row_mass * full).sum(axis=-1)


def attention_stats(A, threshold: float, bin_width: float) -> AttentionStats:
    if not bin_width > 0:
        raise ParameterError(f"bin_width must be positive, got {bin_width}")
    a = _values(A)
    if a.ndim == 1:
        a = a[None, :]
    top = max(float(a.max(initial=0.0)), 1.0)
    num_bins = int(np.floor(top / bin_width)) + 1
    edges = np.arange(num_bins + 1) * bin_width
    idx = np.clip(np.floor(a / bin_width).astype(np.int64), 0, num_bins - 1)
    # a / bw can round across an edge; settle membership against the edges themselves
    idx = np.where(a < edges[idx], idx - 1, idx)
    idx = np.where((a >= edges[idx + 1]) & (idx < num_bins - 1), idx + 1, idx)
    idx = np.clip(idx, 0, num_bins - 1)
    onehot = idx[..., None] == np.arange(num_bins)
    row_counts = onehot.sum(axis=-2)
    row_mass = (onehot * a[..., None]).sum(axis=-2)
    below = a <= threshold
    return AttentionStats(
        bin_width=float(bin_width),
        threshold=float(threshold),
        bin_edges=edges,
        row_counts=row_counts,
        row_mass=row_mass,
        trivial_count=below.sum(axis=-1),
        trivial_mass=np.where(below, a, 0.0).sum(axis=-1),
        row_max=a.max(axis=-1),
        row_total=a.sum(axis=-1),
    )
