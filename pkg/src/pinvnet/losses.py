"""Training objectives for SPNNs and the two-phase training loops.

Every loss returns ``(value, grads)`` where ``grads`` maps parameter names of
:meth:`SpnnModel.parameters` to arrays. The surjectivity and stability
terms are per-element means; the natural and min-norm terms sum squares over
features and average over the batch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import AdamState, Rng, adam_step, clip_grad_norm
from .spnn import SpnnModel

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


class FrozenParameterViolation(RuntimeError):
    pass


@dataclass
class LossWeights:
    task: float = 1.0
    surj: float = 40.0
    stab: float = 40.0
    natural: float = 0.3
    r_surj: float = 1.0
    r_stab: float = 1.0


@dataclass
class TrainConfig:
    phase1_epochs: int = 15
    phase2_epochs: int = 50
    batch_size: int = 256
    lr: float = 2e-4
    lr_r: float = 1e-4
    warmup: int = 200
    grad_clip: float = 1.0
    task_kind: str = "cross_entropy"
    weights: LossWeights = field(default_factory=LossWeights)
    plateau_tol: float = 1e-4
    plateau_epochs: int = 3
    seed: int = 556

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        w = self.weights
        if min(asdict(w).values()) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.phase1_epochs and max(w.task, w.surj, w.stab) <= 0:
            raise ValueError("phase I needs a positive loss weight")
        if self.phase2_epochs and max(w.natural, w.r_surj, w.r_stab) <= 0:
            raise ValueError("phase II needs a positive loss weight")

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(acc: dict, grads: dict, scale: float = 1.0) -> dict:
    for k, v in grads.items():
        acc[k] = acc[k] + scale * v if k in acc else scale * v
    return acc


def _check(value: float, name: str) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{name} loss is not finite")
    return float(value)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_task(m: SpnnModel, x, target, kind: str = "cross_entropy"):
    """Task loss on ``g(x)``: MSE or per-attribute binary cross-entropy on logits."""
    x = np.atleast_2d(x)
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    y, _, trace = m.forward_trace(x)
    if target.shape != y.shape:
        raise ValueError(f"target shape {target.shape} does not match output {y.shape}")
    n = y.size
    if kind == "mse":
        diff = y - target
        value = np.sum(diff * diff) / n
        dy = 2.0 * diff / n
    elif kind == "cross_entropy":
        # log(1 + e^y) - t y, written to stay finite for large |y|
        value = np.sum(np.logaddexp(0.0, y) - target * y) / n
        dy = (sigmoid(y) - target) / n
    else:
        raise ValueError(f"unknown task loss {kind!r}")
    _check(value, "task")
    _, grads = m.forward_backward(trace, dy)
    return value, m.finalize_grads(grads)


def loss_surjectivity(m: SpnnModel, y):
    """``mean ||y - g(g^+(y))||^2`` through the learned inverse."""
    y = np.atleast_2d(y)
    xh, inv_trace = m.inverse_trace(y)
    yh, _, fwd_trace = m.forward_trace(xh)
    diff = y - yh
    value = np.sum(diff * diff) / diff.size
    dxh, grads = m.forward_backward(fwd_trace, -2.0 * diff / diff.size)
    _, _, g_inv = m.inverse_backward(inv_trace, dxh)
    return value, m.finalize_grads(_merge(grads, g_inv))


def loss_stability(m: SpnnModel, x):
    """``mean ||x - g^+(g(x))||^2`` through the learned inverse."""
    x = np.atleast_2d(x)
    y, _, fwd_trace = m.forward_trace(x)
    xh, inv_trace = m.inverse_trace(y)
    diff = x - xh
    value = np.sum(diff * diff) / diff.size
    dy, _, g_inv = m.inverse_backward(inv_trace, -2.0 * diff / diff.size)
    _, grads = m.forward_backward(fwd_trace, dy)
    return value, m.finalize_grads(_merge(grads, g_inv))


def natural_terms(m: SpnnModel, y, mode: str = "learned") -> tuple[float, float]:
    """Split ``mean ||G(g^+(y)) - G(0)||^2`` into its range and null parts."""
    y = np.atleast_2d(y)
    origin = m.completion(np.zeros(m.input_dim))
    p = m.completion(m.pinv(y, mode))
    dr = p.range - origin.range
    dn = p.null - origin.null
    return float(np.sum(dr * dr) / len(y)), float(np.sum(dn * dn) / len(y))


def loss_natural(m: SpnnModel, y):
    """``mean ||G(g^+(y)) - G(0)||^2`` with gradients for the auxiliary nets only."""
    y = np.atleast_2d(y)
    origin = m.completion(np.zeros(m.input_dim))
    xh, inv_trace = m.inverse_trace(y)
    yh, nulls, fwd_trace = m.forward_trace(xh)
    dr = yh - origin.range
    q0 = m._split_null(origin.null[None, :])
    dn = [z - z0 for z, z0 in zip(nulls, q0)]
    n = len(y)
    value = (np.sum(dr * dr) + sum(np.sum(d * d) for d in dn)) / n
    dxh, _ = m.forward_backward(fwd_trace, 2.0 * dr / n, [2.0 * d / n for d in dn])
    _, _, g_inv = m.inverse_backward(inv_trace, dxh)
    return value, {k: v for k, v in g_inv.items() if ".r." in k}


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def attribute_accuracy(m: SpnnModel, x, labels) -> float:
    return float(np.mean((m.forward(x) > 0) == (np.asarray(labels) > 0.5)))


def _snapshot(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def train_phase1(m: SpnnModel, x, labels, cfg: TrainConfig, test=None, log_fn=None, start_epoch: int = 0):
    """Optimize the forward parameters (and ``r`` at ``lr_r`` through the auxiliary losses).

    Returns the list of per-epoch metric records. ``test`` is an optional
    ``(x, labels)`` held-out split used for the reported accuracy.
    """
    w = cfg.weights
    rng = Rng(cfg.seed).child(1, start_epoch)
    fwd, rpar = m.forward_parameters(), m.r_parameters()
    opt_f = AdamState(lr=cfg.lr, grad_clip=None, warmup=cfg.warmup)
    opt_r = AdamState(lr=cfg.lr_r, grad_clip=None, warmup=cfg.warmup)
    metrics = []
    history = []
    for epoch in range(start_epoch, start_epoch + cfg.phase1_epochs):
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb, tb = x[idx], labels[idx]
            last_good = _snapshot(m.parameters())
            total = {}
            parts = []
            for weight, fn, arg in ((w.task, lambda mm, a: loss_task(mm, a, tb, cfg.task_kind), xb),
                                    (w.surj, loss_surjectivity, m.forward(xb)),
                                    (w.stab, loss_stability, xb)):
                if weight > 0:
                    v, g = fn(m, arg)
                    _merge(total, g, weight)
                else:
                    v = 0.0
                parts.append(v)
            if not all(np.isfinite(parts)):
                raise TrainingDiverged(f"non-finite phase I loss at epoch {epoch}", last_good)
            clip_grad_norm(total, cfg.grad_clip)
            try:
                adam_step(opt_f, fwd, {k: total[k] for k in fwd if k in total})
                if any(k in total for k in rpar):
                    adam_step(opt_r, rpar, {k: total[k] for k in rpar if k in total})
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            sums += np.array(parts) * len(idx)
            count += len(idx)
        ev_x, ev_t = test if test is not None else (x, labels)
        rec = {"phase": 1, "epoch": epoch, "loss_task": sums[0] / count, "loss_surj": sums[1] / count,
               "loss_stab": sums[2] / count, "loss_natural": None, "accuracy": attribute_accuracy(m, ev_x, ev_t)}
        metrics.append(rec)
        if log_fn:
            log_fn(rec)
        log.info("phase 1 epoch %d: %s", epoch, rec)
        history.append(rec["loss_task"])
        if len(history) > cfg.plateau_epochs:
            recent = history[-cfg.plateau_epochs - 1:]
            if max(recent) - min(recent) < cfg.plateau_tol:
                break
    return metrics


def train_phase2(m: SpnnModel, y_samples, cfg: TrainConfig, x_samples=None, log_fn=None,
                 start_epoch: int = 0, objective: str = "natural"):
    """Optimize the auxiliary nets with the forward parameters frozen.

    ``objective="min_norm"`` replaces the natural loss by ``mean ||g^+(y)||^2``
    (used to build the ablation baseline).
    """
    w = cfg.weights
    if w.r_stab > 0 and x_samples is None:
        raise ValueError("phase II stability term needs x samples")
    rng = Rng(cfg.seed).child(2, start_epoch)
    fwd, rpar = m.forward_parameters(), m.r_parameters()
    frozen = _snapshot(fwd)
    opt = AdamState(lr=cfg.lr_r, grad_clip=cfg.grad_clip, warmup=cfg.warmup)
    main = loss_natural if objective == "natural" else loss_min_norm
    metrics = []
    for epoch in range(start_epoch, start_epoch + cfg.phase2_epochs):
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(y_samples), cfg.batch_size, rng):
            yb = y_samples[idx]
            total = {}
            v_nat, g = main(m, yb)
            _merge(total, g, w.natural)
            v_surj = v_stab = 0.0
            if w.r_surj > 0:
                v_surj, g = loss_surjectivity(m, yb)
                _merge(total, g, w.r_surj)
            if w.r_stab > 0:
                v_stab, g = loss_stability(m, x_samples[idx % len(x_samples)])
                _merge(total, g, w.r_stab)
            if not np.isfinite(v_nat + v_surj + v_stab):
                raise TrainingDiverged(f"non-finite phase II loss at epoch {epoch}")
            adam_step(opt, rpar, {k: v for k, v in total.items() if k in rpar})
            sums += np.array([v_nat, v_surj, v_stab]) * len(idx)
            count += len(idx)
        rec = {"phase": 2, "epoch": epoch, "loss_task": None, "loss_surj": sums[1] / count,
               "loss_stab": sums[2] / count, "loss_natural": sums[0] / count, "accuracy": None}
        metrics.append(rec)
        if log_fn:
            log_fn(rec)
        log.info("phase 2 epoch %d: %s", epoch, rec)
    for k, v in fwd.items():
        if not np.array_equal(v, frozen[k]):
            raise FrozenParameterViolation(f"forward parameter {k!r} changed during phase II")
    return metrics


def loss_min_norm(m: SpnnModel, y):
    """``mean ||g^+(y)||^2`` in input space, gradients for the auxiliary nets only."""
    y = np.atleast_2d(y)
    xh, inv_trace = m.inverse_trace(y)
    value = np.sum(xh * xh) / len(y)
    _, _, g_inv = m.inverse_backward(inv_trace, 2.0 * xh / len(y))
    return value, {k: v for k, v in g_inv.items() if ".r." in k}


def r_distance_to_origin_nulls(m: SpnnModel, y) -> float:
    """Mean distance between each block's ``r`` output and its slice of ``q(0)``.

    Each block's ``r`` is evaluated on the vector it sees along the natural
    inverse chain, so a perfectly trained ``r`` gives exactly zero.
    """
    y = np.atleast_2d(y)
    q0 = m._split_null(m.q_origin()[None, :])
    total = np.zeros(len(y))
    h = y
    k = len(m.blocks)
    for st in reversed(m.stages):
        if hasattr(st, "r_net"):
            k -= 1
            d = st.r_net(h) - q0[k]
            total += np.sum(d * d, axis=1)
            h, _ = st.inverse(h, np.broadcast_to(q0[k], (len(h), st.null_dim)))
        else:
            h = st.inverse(h)
    return float(np.mean(np.sqrt(total)))
