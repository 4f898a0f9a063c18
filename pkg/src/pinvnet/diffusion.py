"""Toy DDPM prior and the NLBP-guided ancestral sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nlbp import NlbpConfig, adaptive_lambda, attribute_delta, nlbp_naive, nlbp_update
from .nn import AdamState, MlpNet, Rng, adam_step
from .spnn import SpnnModel

log = logging.getLogger(__name__)


class SamplingAborted(FloatingPointError):
    pass


class GuidanceContractError(AssertionError):
    pass


@dataclass
class DiffusionSchedule:
    """Linear beta schedule; ``betas[t]`` for ``t = 0 .. T-1``."""

    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 2e-2 * 10

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T)
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def rescaled(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2, reference_T: int = 1000):
        """Shorter schedule with betas scaled by ``reference_T / T`` so the total noise is kept."""
        k = reference_T / T
        return cls(T, beta_start * k, beta_end * k)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t < 0 else float(self.alpha_bars[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def q_sample(x0, t: int, noise, sched: DiffusionSchedule):
    if not 0 <= t < sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T})")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predict_x0(x_t, t: int, eps_hat, sched: DiffusionSchedule):
    if not 0 <= t < sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T})")
    ab = sched.alpha_bars[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(float(T)) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class Denoiser:
    """Epsilon-prediction MLP fed ``[x_t | embed(t)]``."""

    net: MlpNet
    data_dim: int
    emb_dim: int
    T: int

    @classmethod
    def create(cls, data_dim: int, T: int, rng: Rng, width: int = 128, depth: int = 3,
               emb_dim: int = 32) -> "Denoiser":
        net = MlpNet.create([data_dim + emb_dim, *[width] * depth, data_dim], rng, "relu", "linear")
        return cls(net, data_dim, emb_dim, T)

    def _inputs(self, x_t, t):
        x_t = np.atleast_2d(x_t)
        t = np.broadcast_to(np.asarray(t), (len(x_t),))
        return np.concatenate([x_t, time_embedding(t, self.emb_dim, self.T)], axis=1)

    def __call__(self, x_t, t) -> np.ndarray:
        return self.net(self._inputs(x_t, t))

    def loss(self, x_t, t, eps):
        """Mean squared epsilon error and its parameter gradients."""
        out, tape = self.net.forward(self._inputs(x_t, t))
        diff = out - eps
        value = float(np.mean(diff * diff))
        grads, _ = self.net.backward(tape, 2.0 * diff / diff.size)
        return value, grads

    def parameters(self) -> dict:
        return dict(self.net.named_parameters())

    def describe(self) -> dict:
        return {"data_dim": self.data_dim, "emb_dim": self.emb_dim, "T": self.T,
                "layer_dims": list(self.net.layer_dims), "hidden_activation": self.net.hidden_activation}


@dataclass
class DenoiserConfig:
    steps: int = 6000
    batch_size: int = 256
    lr: float = 1e-3
    grad_clip: float = 1.0
    warmup: int = 200
    seed: int = 556
    log_every: int = 500


def train_denoiser(den: Denoiser, data, sched: DiffusionSchedule, cfg: DenoiserConfig, val=None, log_fn=None):
    """Fit ``eps_theta(x_t, t)`` to the forward-process noise. Returns metric records."""
    data = np.asarray(data, dtype=np.float64)
    rng = Rng(cfg.seed).child(3)
    params = den.parameters()
    opt = AdamState(lr=cfg.lr, grad_clip=cfg.grad_clip, warmup=cfg.warmup)
    val_rng = Rng(cfg.seed).child(4)
    val = data[: min(len(data), 512)] if val is None else np.asarray(val)
    val_t = val_rng.integers(0, sched.T, len(val))
    val_eps = val_rng.normal(size=val.shape)
    val_xt = np.stack([q_sample(v, int(t), e, sched) for v, t, e in zip(val, val_t, val_eps)])

    def val_loss():
        return float(np.mean((den(val_xt, val_t) - val_eps) ** 2))

    metrics = [{"phase": "denoiser", "step": 0, "loss": None, "val_loss": val_loss()}]
    running = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), cfg.batch_size)
        t = rng.integers(0, sched.T, cfg.batch_size)
        eps = rng.normal(size=(cfg.batch_size, data.shape[1]))
        ab = sched.alpha_bars[t][:, None]
        x_t = np.sqrt(ab) * data[idx] + np.sqrt(1.0 - ab) * eps
        value, grads = den.loss(x_t, t, eps)
        if not np.isfinite(value):
            raise FloatingPointError(f"denoiser loss diverged at step {step}")
        adam_step(opt, params, grads)
        den.net.version += 1
        running.append(value)
        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = {"phase": "denoiser", "step": step, "loss": float(np.mean(running)), "val_loss": val_loss()}
            running = []
            metrics.append(rec)
            if log_fn:
                log_fn(rec)
            log.info("denoiser %s", rec)
    return metrics


def time_travel(x_t, t: int, length: int, sched: DiffusionSchedule, rng: Rng):
    """Re-noise a state at level ``t`` (``-1`` = clean) forward to level ``t + length``."""
    if length == 0:
        return np.array(x_t, copy=True)
    if t + length > sched.T - 1:
        raise ValueError("cannot travel beyond the last timestep")
    ratio = sched.alpha_bar(t + length) / sched.alpha_bar(t)
    x_t = np.asarray(x_t)
    return np.sqrt(ratio) * x_t + np.sqrt(1.0 - ratio) * rng.normal(size=x_t.shape)


@dataclass
class SamplerConfig:
    sampling_steps: int = 100
    guidance_start_t: int = 80
    travel_length: int = 1
    travel_repeat: int = 1
    nlbp: NlbpConfig = field(default_factory=NlbpConfig)
    attribute: int | None = None
    check_contracts: bool = True
    interp_tol: float = 1e-6
    null_tol: float = 1e-7

    def __post_init__(self):
        if isinstance(self.nlbp, dict):
            self.nlbp = NlbpConfig(**self.nlbp)
        if self.travel_repeat < 1 or self.travel_length < 1:
            raise ValueError("travel_repeat and travel_length must be at least 1")


def timestep_grid(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ValueError("sampling_steps must lie in [1, T]")
    return np.unique(np.round(np.linspace(0, T - 1, steps)).astype(int))[::-1]


TargetRule = Callable[[np.ndarray], np.ndarray]


@dataclass
class SampleResult:
    x0: np.ndarray
    trajectory: list


def _posterior_step(x_t, x0_hat, t, t_prev, sched, noise):
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    beta = 1.0 - ab_t / ab_prev
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_hat + ct * x_t
    if t_prev < 0:
        return mean
    return mean + np.sqrt(var) * noise


def sample_guided(den: Denoiser, m: SpnnModel | None, target, sched: DiffusionSchedule, cfg: SamplerConfig,
                  seeds, pinv_model: SpnnModel | None = None, pinv_mode: str = "natural") -> SampleResult:
    """Ancestral sampling of ``len(seeds)`` independent chains with NLBP guidance.

    ``target`` is ``None`` (unguided), an array of static targets (one row per
    chain or a single row), or a callable mapping the current ``g(x0_hat)`` to
    a target. ``pinv_model``/``pinv_mode`` select the pseudo-inverse used
    inside the update; the completion always comes from ``m``.
    """
    rngs = [Rng(int(s)) for s in seeds]
    n = len(rngs)
    dim = den.data_dim
    grid = timestep_grid(sched.T, cfg.sampling_steps)
    levels = list(grid) + [-1]
    x = np.stack([r.normal(size=dim) for r in rngs])
    nb = cfg.nlbp
    pm = pinv_model if pinv_model is not None else m
    static = None
    if target is not None and not callable(target):
        static = np.broadcast_to(np.atleast_2d(np.asarray(target, dtype=np.float64)), (n, m.output_dim))
    trajectory = []

    def step(x, i):
        t, t_prev = levels[i], levels[i + 1]
        x0_hat = predict_x0(x, t, den(x, t), sched)
        rec = {"t": int(t), "lambda_t": 0.0, "residual": None, "null_drift": None}
        if target is not None and t <= cfg.guidance_start_t:
            y_cur = m.forward(x0_hat)
            y_tgt = static if static is not None else target(y_cur)
            if nb.adaptive:
                lam = adaptive_lambda(attribute_delta(y_cur, y_tgt, cfg.attribute, nb.delta_space), nb.alpha, nb.gamma)
            else:
                lam = np.full(n, nb.lam)
            rec["lambda_t"] = float(np.mean(lam))
            if np.any(lam > 0):
                if nb.update == "naive":
                    new = nlbp_naive(pm, x0_hat, y_tgt, pinv_mode)
                else:
                    new = nlbp_update(pm, x0_hat, y_tgt, lam, pinv_mode)
                before = m.completion(x0_hat)
                after = m.completion(new)
                expected = (1.0 - lam[:, None]) * y_cur + lam[:, None] * y_tgt
                interp = float(np.max(np.abs(after.range - expected)))
                drift = float(np.max(np.abs(after.null - before.null)))
                rec["interp_err"] = interp
                rec["null_drift"] = drift
                if cfg.check_contracts and nb.update == "gentle":
                    scale = 1.0 + float(np.max(np.abs(expected)))
                    if interp > cfg.interp_tol * scale:
                        raise GuidanceContractError(f"t={t}: range interpolation error {interp:.3e}")
                    if pinv_mode == "natural" and drift > cfg.null_tol * (1.0 + float(np.max(np.abs(before.null)))):
                        raise GuidanceContractError(f"t={t}: null component drifted by {drift:.3e}")
                x0_hat = new
            rec["residual"] = float(np.mean(np.linalg.norm(m.forward(x0_hat) - y_tgt, axis=1)))
        noise = np.stack([r.normal(size=dim) for r in rngs]) if t_prev >= 0 else None
        x_new = _posterior_step(x, x0_hat, t, t_prev, sched, noise)
        if not np.all(np.isfinite(x_new)):
            raise SamplingAborted(f"non-finite state at t={t}")
        trajectory.append(rec)
        return x_new

    i = 0
    L = cfg.travel_length
    while i < len(grid):
        seg_end = min(i + L, len(grid))
        travel = cfg.travel_repeat > 1 and levels[i] <= cfg.guidance_start_t
        repeats = cfg.travel_repeat if travel else 1
        for rep in range(repeats):
            for j in range(i, seg_end):
                x = step(x, j)
            if rep < repeats - 1:
                lo, hi = levels[seg_end], levels[i]
                x = np.stack([time_travel(xc, lo, hi - lo, sched, r) for xc, r in zip(x, rngs)])
        i = seg_end
    return SampleResult(x, trajectory)

