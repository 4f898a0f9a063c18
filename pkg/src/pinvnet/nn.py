"""Small fully-connected networks with hand-written backward passes, Adam, and RNG."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

SCALE_HEAD_GAIN = 2.0


class Rng:
    """Seeded counter-based generator (Philox) with deterministic child streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, *key: int) -> "Rng":
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key))
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r._gen = np.random.Generator(np.random.Philox(ss))
        return r

    def normal(self, size=None, scale=1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)


@dataclass
class MlpTape:
    inputs: list
    pre: list
    out: np.ndarray
    version: int


@dataclass
class MlpNet:
    """Feed-forward net; ``scale_head`` outputs ``exp(2 tanh(a))``, always positive."""

    layer_dims: tuple
    weights: list
    biases: list
    hidden_activation: str = "tanh"
    output_head: str = "linear"
    version: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.hidden_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in ("linear", "scale_head"):
            raise ValueError(f"unknown output head {self.output_head!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k + 1], self.layer_dims[k]) or b.shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k} shapes {w.shape}/{b.shape} do not match dims {self.layer_dims}")

    @classmethod
    def create(cls, dims, rng: Rng, hidden_activation="tanh", output_head="linear", zero_last=False) -> "MlpNet":
        dims = tuple(int(d) for d in dims)
        weights, biases = [], []
        for k in range(len(dims) - 1):
            fan_in, fan_out = dims[k], dims[k + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        if zero_last:
            weights[-1][:] = 0.0
        return cls(dims, weights, biases, hidden_activation, output_head)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}W{k}", w
            yield f"{prefix}b{k}", b

    def copy(self) -> "MlpNet":
        return MlpNet(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                      self.hidden_activation, self.output_head)

    def _act(self, a):
        return np.tanh(a) if self.hidden_activation == "tanh" else np.maximum(a, 0.0)

    def _act_grad(self, a, h):
        return 1.0 - h * h if self.hidden_activation == "tanh" else (a > 0).astype(a.dtype)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape}")
        inputs, pre = [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w.T + b
            pre.append(a)
            h = self._act(a) if k < last else a
        if self.output_head == "scale_head":
            h = np.exp(SCALE_HEAD_GAIN * np.tanh(h))
        return h, MlpTape(inputs, pre, h, self.version)

    def backward(self, tape: MlpTape, upstream: np.ndarray) -> tuple[dict, np.ndarray]:
        """Return ``(param_grads, input_grad)`` for the forward call recorded in ``tape``."""
        if tape.version != self.version:
            raise RuntimeError("stale tape: parameters changed since the forward pass")
        g = np.asarray(upstream, dtype=np.float64)
        if self.output_head == "scale_head":
            th = np.tanh(tape.pre[-1])
            g = g * tape.out * SCALE_HEAD_GAIN * (1.0 - th * th)
        grads = {}
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = tape.inputs[k]
            g2 = g.reshape(-1, g.shape[-1])
            grads[f"W{k}"] = g2.T @ h_in.reshape(-1, h_in.shape[-1])
            grads[f"b{k}"] = g2.sum(axis=0)
            g = g @ self.weights[k]
            if k > 0:
                g = g * self._act_grad(tape.pre[k - 1], h_in)
        return grads, g


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    warmup: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup > 0 and self.step <= self.warmup:
            return self.lr * self.step / self.warmup
        return self.lr


def clip_grad_norm(grads: dict, max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; return the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(state: AdamState, params: dict, grads: dict) -> float:
    """One bias-corrected Adam update applied in place. Returns the pre-clip gradient norm."""
    grads = {k: np.array(g, dtype=np.float64) for k, g in grads.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r} at step {state.step + 1}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {params[k].shape}")
    norm = clip_grad_norm(grads, state.grad_clip)
    state.step += 1
    lr = state.current_lr()
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params[k] -= lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return norm


def gradient_check(f: Callable[[], tuple[float, dict]], params: dict, eps: float = 1e-6,
                   max_entries: int | None = None, rng: Rng | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the loss from the current contents of ``params`` (which
    are perturbed in place) and returns ``(loss, grads)``. With ``max_entries``
    only that many randomly chosen coordinates per tensor are probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    _, analytic = f()
    analytic = {k: np.array(v) for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or Rng(0)).permutation(flat.size)[:max_entries]
        ga = analytic.get(name, np.zeros_like(p)).reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = f()[0]
            flat[i] = old - eps
            lm = f()[0]
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            denom = max(abs(num), abs(ga[i]), 1e-6)
            worst = max(worst, abs(num - ga[i]) / denom)
    return worst
