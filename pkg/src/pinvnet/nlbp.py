"""Non-linear back-projection onto the pre-image of a target, and guidance helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AttributeStats
from .nn import Rng
from .spnn import CompletionPoint, SpnnModel

BASE_MODES = ("learned", "natural", "constant")
PINV_VARIANTS = ("learned_r", "natural_closed_form", "constant", "random_r", "min_norm_r")


@dataclass
class NlbpConfig:
    lam: float = 0.5
    adaptive: bool = False
    alpha: float = 0.8
    gamma: float = 2.0
    delta_space: str = "prob"
    pinv_mode: str = "natural_closed_form"
    update: str = "gentle"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("guidance scale must lie in [0, 1]")
        if not 0.0 < self.alpha <= 1.0 or self.gamma <= 0:
            raise ValueError("adaptive schedule needs alpha in (0, 1] and gamma > 0")
        if self.pinv_mode not in PINV_VARIANTS:
            raise ValueError(f"unknown pinv mode {self.pinv_mode!r}")
        if self.delta_space not in ("prob", "logit"):
            raise ValueError("delta_space must be 'prob' or 'logit'")
        if self.update not in ("gentle", "naive"):
            raise ValueError("update must be 'gentle' or 'naive'")


def resolve_pinv(m: SpnnModel, variant: str, rng: Rng | None = None,
                 min_norm_model: SpnnModel | None = None) -> tuple[SpnnModel, str]:
    """Map a pseudo-inverse variant name to ``(model, base_mode)``.

    ``random_r`` swaps in freshly initialized auxiliary nets; ``min_norm_r``
    needs a model whose auxiliary nets were trained on the min-norm objective.
    """
    if variant in ("learned_r", "learned"):
        return m, "learned"
    if variant in ("natural_closed_form", "natural"):
        return m, "natural"
    if variant == "constant":
        return m, "constant"
    if variant == "random_r":
        return m.random_r(rng or Rng(0)), "learned"
    if variant == "min_norm_r":
        if min_norm_model is None:
            raise ValueError("min_norm_r needs a model trained for minimum-norm inverses")
        return min_norm_model, "learned"
    raise ValueError(f"unknown pinv variant {variant!r}")


def _completed_pinv(m: SpnnModel, y, mode, z=None) -> np.ndarray:
    return m.completion(m.pinv(y, mode, z)).vector()


def nlbp_update(m: SpnnModel, x, y, lam=1.0, mode: str = "natural", z=None) -> np.ndarray:
    """``G^{-1}(G(x) + lam [G(g^+(y)) - G(g^+(g(x)))])``; ``lam`` may be per-sample."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    yb = np.atleast_2d(np.asarray(y, dtype=np.float64))
    gx = m.completion(xb)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    shift = _completed_pinv(m, yb, mode, z) - _completed_pinv(m, gx.range, mode, z)
    v = gx.vector() + lam * shift
    d = m.output_dim
    out = m.completion_inverse(CompletionPoint(v[:, :d], v[:, d:]))
    return out[0] if single else out


def nlbp_exact(m: SpnnModel, x, y, mode: str = "natural", z=None) -> np.ndarray:
    return nlbp_update(m, x, y, 1.0, mode, z)


def nlbp_gentle(m: SpnnModel, x, y, lam, mode: str = "natural", z=None) -> np.ndarray:
    lam_arr = np.asarray(lam)
    if np.any(lam_arr < 0) or np.any(lam_arr > 1):
        raise ValueError("guidance scale must lie in [0, 1]")
    return nlbp_update(m, x, y, lam, mode, z)


def nlbp_naive(m: SpnnModel, x, y, mode: str = "natural", z=None) -> np.ndarray:
    """Input-space update ``x + g^+(y) - g^+(g(x))``; not guaranteed to reach ``g(x') = y``."""
    x = np.asarray(x, dtype=np.float64)
    return x + m.pinv(y, mode, z) - m.pinv(m.forward(x), mode, z)


def adaptive_lambda(delta_n, alpha: float = 0.8, gamma: float = 2.0):
    if not 0.0 < alpha <= 1.0 or gamma <= 0:
        raise ValueError("need alpha in (0, 1] and gamma > 0")
    return alpha * np.tanh(gamma * np.asarray(delta_n, dtype=np.float64))


def attribute_delta(y_cur, y_target, n: int, space: str = "prob"):
    a, b = np.asarray(y_cur)[..., n], np.asarray(y_target)[..., n]
    if space == "prob":
        a, b = 0.5 * (1.0 + np.tanh(0.5 * a)), 0.5 * (1.0 + np.tanh(0.5 * b))
    return np.abs(a - b)


def dynamic_target(y_cur, n: int, stats: AttributeStats) -> np.ndarray:
    """Copy of ``y_cur`` with attribute ``n`` pushed to ``mu_n + 2 sigma_n``."""
    y_cur = np.asarray(y_cur, dtype=np.float64)
    if not 0 <= n < y_cur.shape[-1]:
        raise IndexError(f"attribute index {n} out of range")
    out = y_cur.copy()
    out[..., n] = stats.mu[n] + 2.0 * stats.sigma[n]
    return out


def covariance_adjust(delta_n, n: int, stats: AttributeStats) -> np.ndarray:
    """Shift of every attribute implied by moving attribute ``n`` by ``delta_n``."""
    if not 0 <= n < len(stats.mu):
        raise IndexError(f"attribute index {n} out of range")
    snn = stats.cov[n, n]
    if snn <= 1e-12:
        raise ValueError(f"attribute {n} has degenerate variance {snn:.3e}")
    ratio = stats.cov[:, n] / snn
    delta_n = np.asarray(delta_n, dtype=np.float64)
    out = delta_n[..., None] * ratio
    out[..., n] = delta_n
    return out


def covariance_target(y_cur, n: int, stats: AttributeStats) -> np.ndarray:
    y_cur = np.asarray(y_cur, dtype=np.float64)
    goal = stats.mu[n] + 2.0 * stats.sigma[n]
    return y_cur + covariance_adjust(goal - y_cur[..., n], n, stats)
