"""Surjective pseudo-invertible coupling networks.

A block maps ``R^D -> R^d``: rotate by an orthogonal ``U`` (Cayley
parameterized), split into ``[x0 | x1]`` and emit ``y = x0 * s(x1) + t(x1)``.
The discarded ``x1`` is the block's null component. Stacking blocks (with
optional pixel-unshuffle reshapes in between) gives the forward map ``g``;
``g`` together with the concatenated null components is the bijective
completion ``G``.

All arrays are batched along the first axis; single vectors are accepted and
returned as single vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .nn import MlpNet, Rng

PINV_MODES = ("learned", "natural", "constant")


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


def _prefixed(grads: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in grads.items()}


def _add_into(acc: dict, grads: dict) -> None:
    for k, v in grads.items():
        if k in acc:
            acc[k] = acc[k] + v
        else:
            acc[k] = v


@dataclass
class Reshape:
    """Pixel-unshuffle stage acting on flattened ``(C, H, W)`` vectors."""

    channels: int
    height: int
    width: int
    factor: int

    def __post_init__(self):
        if self.height % self.factor or self.width % self.factor:
            raise ValueError("reshape dims must be divisible by the factor")
        idx = np.arange(self.in_dim)
        self._perm = linalg.pixel_unshuffle(idx, self.channels, self.height, self.width, self.factor)
        self._inv = np.argsort(self._perm)

    @property
    def in_dim(self) -> int:
        return self.channels * self.height * self.width

    out_dim = in_dim

    @property
    def out_shape(self) -> tuple[int, int, int]:
        f = self.factor
        return self.channels * f * f, self.height // f, self.width // f

    def forward(self, x):
        return x[..., self._perm]

    def inverse(self, x):
        return x[..., self._inv]

    def describe(self) -> dict:
        return {"kind": "reshape", "channels": self.channels, "height": self.height,
                "width": self.width, "factor": self.factor}


@dataclass
class SurjectiveBlock:
    in_dim: int
    out_dim: int
    mixer: np.ndarray
    s_net: MlpNet
    t_net: MlpNet
    r_net: MlpNet

    def __post_init__(self):
        D, d = self.in_dim, self.out_dim
        if not 1 <= d < D:
            raise ValueError(f"need 1 <= d < D, got d={d}, D={D}")
        if self.mixer.shape != (D * (D - 1) // 2,):
            raise ValueError("mixer generator has the wrong size")
        if self.s_net.output_head != "scale_head":
            raise ValueError("s_net must use the scale head")
        for net, i, o in ((self.s_net, D - d, d), (self.t_net, D - d, d), (self.r_net, d, D - d)):
            if (net.in_dim, net.out_dim) != (i, o):
                raise ValueError(f"sub-network dims {(net.in_dim, net.out_dim)} != {(i, o)}")

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: Rng, hidden: int = 64, depth: int = 2,
               activation: str = "tanh", mixer_scale: float = 0.1) -> "SurjectiveBlock":
        nd = in_dim - out_dim
        mid = [hidden] * depth
        return cls(
            in_dim, out_dim,
            rng.normal(size=in_dim * (in_dim - 1) // 2, scale=mixer_scale),
            MlpNet.create([nd, *mid, out_dim], rng, activation, "scale_head"),
            MlpNet.create([nd, *mid, out_dim], rng, activation, "linear"),
            MlpNet.create([out_dim, *mid, nd], rng, activation, "linear"),
        )

    @property
    def null_dim(self) -> int:
        return self.in_dim - self.out_dim

    def rotation(self) -> np.ndarray:
        return linalg.cayley(linalg.skew_from_params(self.mixer, self.in_dim))

    def named_parameters(self):
        yield "S", self.mixer
        for name, net in (("s", self.s_net), ("t", self.t_net), ("r", self.r_net)):
            yield from net.named_parameters(f"{name}.")

    def describe(self) -> dict:
        return {"kind": "block", "in_dim": self.in_dim, "out_dim": self.out_dim,
                "hidden_activation": self.s_net.hidden_activation,
                "s_dims": list(self.s_net.layer_dims), "t_dims": list(self.t_net.layer_dims),
                "r_dims": list(self.r_net.layer_dims)}

    # forward ---------------------------------------------------------------

    def forward(self, x, u=None):
        """Return ``(y, null, cache)``."""
        u = self.rotation() if u is None else u
        xt = x @ u.T
        x0, x1 = xt[:, :self.out_dim], xt[:, self.out_dim:]
        sv, s_tape = self.s_net.forward(x1)
        tv, t_tape = self.t_net.forward(x1)
        y = x0 * sv + tv
        return y, x1, (x, u, x0, sv, s_tape, t_tape)

    def forward_backward(self, cache, dy, dnull=None):
        x, u, x0, sv, s_tape, t_tape = cache
        grads = {}
        dx0 = dy * sv
        gs, dx1_s = self.s_net.backward(s_tape, dy * x0)
        gt, dx1_t = self.t_net.backward(t_tape, dy)
        dx1 = dx1_s + dx1_t
        if dnull is not None:
            dx1 = dx1 + dnull
        dxt = np.concatenate([dx0, dx1], axis=1)
        _add_into(grads, _prefixed(gs, "s."))
        _add_into(grads, _prefixed(gt, "t."))
        grads["U"] = dxt.T @ x
        return dxt @ u, grads

    # inverse given null ----------------------------------------------------

    def inverse(self, y, z, u=None):
        """Invert the coupling for a given null component ``z``. Returns ``(x, cache)``."""
        u = self.rotation() if u is None else u
        sv, s_tape = self.s_net.forward(z)
        tv, t_tape = self.t_net.forward(z)
        x0 = (y - tv) / sv
        xt = np.concatenate([x0, z], axis=1)
        return xt @ u, (u, xt, x0, sv, s_tape, t_tape)

    def inverse_backward(self, cache, dx):
        """Return ``(dy, dz, grads)``."""
        u, xt, x0, sv, s_tape, t_tape = cache
        dxt = dx @ u.T
        grads = {"U": xt.T @ dx}
        dx0, dz = dxt[:, :self.out_dim], dxt[:, self.out_dim:]
        dy = dx0 / sv
        gs, dz_s = self.s_net.backward(s_tape, -dx0 * x0 / sv)
        gt, dz_t = self.t_net.backward(t_tape, -dy)
        _add_into(grads, _prefixed(gs, "s."))
        _add_into(grads, _prefixed(gt, "t."))
        return dy, dz + dz_s + dz_t, grads

    # learned pseudo-inverse ------------------------------------------------

    def pinv(self, y, u=None):
        z, r_tape = self.r_net.forward(y)
        x, cache = self.inverse(y, z, u)
        return x, (r_tape, cache)

    def pinv_backward(self, cache, dx):
        r_tape, inv_cache = cache
        dy, dz, grads = self.inverse_backward(inv_cache, dx)
        gr, dy_r = self.r_net.backward(r_tape, dz)
        _add_into(grads, _prefixed(gr, "r."))
        return dy + dy_r, grads


@dataclass
class CompletionPoint:
    """A point of the completed space ``[range | null]``; nulls are last-block-first."""

    range: np.ndarray
    null: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.range, self.null], axis=-1)


@dataclass
class SpnnModel:
    stages: list
    input_shape: tuple | None = None

    def __post_init__(self):
        dim = self.stages[0].in_dim
        for st in self.stages:
            if st.in_dim != dim:
                raise ValueError(f"stage input {st.in_dim} does not chain with {dim}")
            dim = st.out_dim
        if not self.blocks:
            raise ValueError("model needs at least one surjective block")

    # construction ----------------------------------------------------------

    @classmethod
    def build(cls, input_shape, block_dims: Sequence[int], rng: Rng, unshuffle: int = 1,
              hidden: int = 64, depth: int = 2, activation: str = "tanh",
              mixer_scale: float = 0.1) -> "SpnnModel":
        """``input_shape`` is an int (flat) or ``(C, H, W)``; ``block_dims`` are block output dims."""
        stages = []
        if isinstance(input_shape, int):
            dim = input_shape
            shape = None
        else:
            shape = tuple(int(v) for v in input_shape)
            dim = int(np.prod(shape))
            if unshuffle > 1:
                stages.append(Reshape(*shape, unshuffle))
        for k, d in enumerate(block_dims):
            stages.append(SurjectiveBlock.create(dim, d, rng.child(k), hidden, depth, activation, mixer_scale))
            dim = d
        return cls(stages, shape)

    @property
    def blocks(self) -> list[SurjectiveBlock]:
        return [st for st in self.stages if isinstance(st, SurjectiveBlock)]

    @property
    def input_dim(self) -> int:
        return self.stages[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.stages[-1].out_dim

    @property
    def null_dim(self) -> int:
        return self.input_dim - self.output_dim

    def named_parameters(self):
        for i, st in enumerate(self.stages):
            if isinstance(st, SurjectiveBlock):
                for name, p in st.named_parameters():
                    yield f"stage{i}.{name}", p

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def forward_parameters(self) -> dict:
        return {k: v for k, v in self.named_parameters() if ".r." not in k}

    def r_parameters(self) -> dict:
        return {k: v for k, v in self.named_parameters() if ".r." in k}

    def copy(self) -> "SpnnModel":
        stages = []
        for st in self.stages:
            if isinstance(st, SurjectiveBlock):
                st = SurjectiveBlock(st.in_dim, st.out_dim, st.mixer.copy(), st.s_net.copy(),
                                     st.t_net.copy(), st.r_net.copy())
            else:
                st = Reshape(st.channels, st.height, st.width, st.factor)
            stages.append(st)
        return SpnnModel(stages, self.input_shape)

    def with_r_nets(self, r_nets: Sequence[MlpNet]) -> "SpnnModel":
        """Copy sharing forward parameters but using the given auxiliary nets."""
        stages, it = [], iter(r_nets)
        for st in self.stages:
            if isinstance(st, SurjectiveBlock):
                st = SurjectiveBlock(st.in_dim, st.out_dim, st.mixer, st.s_net, st.t_net, next(it))
            stages.append(st)
        return SpnnModel(stages, self.input_shape)

    def random_r(self, rng: Rng, hidden: int = 64, depth: int = 2) -> "SpnnModel":
        nets = [MlpNet.create([b.out_dim, *[hidden] * depth, b.null_dim], rng.child(k), b.r_net.hidden_activation)
                for k, b in enumerate(self.blocks)]
        return self.with_r_nets(nets)

    def linearized(self, slicing: bool = False) -> "SpnnModel":
        """Copy with ``s = 1`` and ``t = 0`` (and ``U = I`` when ``slicing``)."""
        m = self.copy()
        for b in m.blocks:
            for net in (b.s_net, b.t_net):
                net.weights[-1][:] = 0.0
                net.biases[-1][:] = 0.0
            if slicing:
                b.mixer[:] = 0.0
        return m

    def induced_matrix(self) -> np.ndarray:
        """Matrix of ``g`` for a linearized model (columns are images of basis vectors)."""
        return self.forward(np.eye(self.input_dim)).T

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape) if self.input_shape else None,
                "input_dim": self.input_dim, "output_dim": self.output_dim,
                "stages": [st.describe() for st in self.stages]}

    # traced passes ---------------------------------------------------------

    def _rots(self):
        return [st.rotation() if isinstance(st, SurjectiveBlock) else None for st in self.stages]

    def forward_trace(self, x, rots=None):
        """Return ``(y, nulls_in_block_order, trace)``."""
        rots = rots or self._rots()
        trace, nulls = [], []
        h = x
        for st, u in zip(self.stages, rots):
            if isinstance(st, SurjectiveBlock):
                h, z, cache = st.forward(h, u)
                nulls.append(z)
                trace.append(cache)
            else:
                h = st.forward(h)
                trace.append(None)
        return h, nulls, trace

    def forward_backward(self, trace, dy, dnulls=None) -> tuple[np.ndarray, dict]:
        grads = {}
        g = dy
        k = len(self.blocks)
        for i in range(len(self.stages) - 1, -1, -1):
            st = self.stages[i]
            if isinstance(st, SurjectiveBlock):
                k -= 1
                dn = None if dnulls is None else dnulls[k]
                g, gb = st.forward_backward(trace[i], g, dn)
                _add_into(grads, _prefixed(gb, f"stage{i}."))
            else:
                g = st.inverse(g)
        return g, grads

    def inverse_trace(self, y, nulls=None, rots=None):
        """Invert the stages from ``y``; with ``nulls=None`` each block predicts its null via ``r``.

        ``nulls`` is in block order. Returns ``(x, trace)``.
        """
        rots = rots or self._rots()
        trace = [None] * len(self.stages)
        h = y
        k = len(self.blocks)
        for i in range(len(self.stages) - 1, -1, -1):
            st = self.stages[i]
            if isinstance(st, SurjectiveBlock):
                k -= 1
                if nulls is None:
                    h, trace[i] = st.pinv(h, rots[i])
                else:
                    h, trace[i] = st.inverse(h, nulls[k], rots[i])
            else:
                h = st.inverse(h)
        return h, trace

    def inverse_backward(self, trace, dx, learned: bool = True):
        """Backward of :meth:`inverse_trace`. Returns ``(dy, dnulls, grads)``."""
        grads = {}
        g = dx
        dnulls = []
        for i, st in enumerate(self.stages):
            if isinstance(st, SurjectiveBlock):
                if learned:
                    g, gb = st.pinv_backward(trace[i], g)
                else:
                    g, dz, gb = st.inverse_backward(trace[i], g)
                    dnulls.append(dz)
                _add_into(grads, _prefixed(gb, f"stage{i}."))
            else:
                g = st.forward(g)
        return g, dnulls, grads

    def finalize_grads(self, grads: dict) -> dict:
        """Convert accumulated rotation gradients into mixer-parameter gradients."""
        out = {}
        for k, v in grads.items():
            if k.endswith(".U"):
                i = int(k.split(".")[0][len("stage"):])
                st = self.stages[i]
                gen = linalg.SkewGenerator(st.in_dim, st.mixer)
                name = k[:-1] + "S"
                out[name] = out.get(name, 0.0) + linalg.cayley_grad(gen, v)
            else:
                out[k] = out.get(k, 0.0) + v
        return out

    # public maps -----------------------------------------------------------

    def _split_null(self, null: np.ndarray) -> list[np.ndarray]:
        """Split a last-block-first null vector into per-block pieces in block order."""
        pieces, pos = [], 0
        for b in reversed(self.blocks):
            pieces.append(null[:, pos:pos + b.null_dim])
            pos += b.null_dim
        return pieces[::-1]

    def _join_null(self, nulls: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(nulls[::-1], axis=1)

    def forward(self, x) -> np.ndarray:
        xb, single = _batched(x)
        if xb.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {xb.shape[1]}")
        return _unbatch(self.forward_trace(xb)[0], single)

    __call__ = forward

    def completion(self, x) -> CompletionPoint:
        xb, single = _batched(x)
        if xb.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {xb.shape[1]}")
        y, nulls, _ = self.forward_trace(xb)
        null = self._join_null(nulls)
        return CompletionPoint(_unbatch(y, single), _unbatch(null, single))

    def null(self, x) -> np.ndarray:
        return self.completion(x).null

    def completion_inverse(self, p: CompletionPoint) -> np.ndarray:
        y, single = _batched(p.range)
        null, _ = _batched(p.null)
        if y.shape[1] != self.output_dim or null.shape[1] != self.null_dim:
            raise ValueError("completion point dims do not match the model")
        if null.shape[0] != y.shape[0]:
            null = np.broadcast_to(null, (y.shape[0], null.shape[1]))
        x, _ = self.inverse_trace(y, self._split_null(null))
        return _unbatch(x, single)

    def q_origin(self) -> np.ndarray:
        return self.completion(np.zeros(self.input_dim)).null

    def pinv(self, y, mode: str = "natural", z=None) -> np.ndarray:
        """Pseudo-inverse ``g^+(y)``.

        ``learned`` chains each block's auxiliary net, ``natural`` uses the
        closed form ``G^{-1}([y | q(0)])``, ``constant`` uses ``G^{-1}([y | z])``.
        """
        yb, single = _batched(y)
        if yb.shape[1] != self.output_dim:
            raise ValueError(f"expected output dim {self.output_dim}, got {yb.shape[1]}")
        if mode == "learned":
            x, _ = self.inverse_trace(yb)
            return _unbatch(x, single)
        if mode == "natural":
            z = self.q_origin()
        elif mode != "constant":
            raise ValueError(f"unknown pinv mode {mode!r}")
        if z is None:
            raise ValueError("constant mode needs z")
        return _unbatch(self.completion_inverse(CompletionPoint(yb, np.atleast_2d(z))), single)


# --- brute-force and structural oracles -------------------------------------------


class OracleDisagreement(RuntimeError):
    pass


def preimage_oracle(m: SpnnModel, y, restarts: int = 32, rng: Rng | None = None,
                    iters: int = 100, h: float = 1e-3, spread: float = 3.0) -> np.ndarray:
    """Minimize ``||G(x) - G(0)||^2`` over the pre-image of ``y`` by multi-start descent.

    The pre-image is parameterized by null coordinates ``z`` through
    ``x = G^{-1}([y | z])``; the objective is evaluated by actually re-applying
    ``G`` and differentiated by central differences only. The step ``h`` is
    kept large because round-off in the range part of the objective would
    otherwise swamp the difference quotient.
    """
    if m.null_dim > 8:
        raise ValueError("brute-force pre-image search is limited to null_dim <= 8")
    rng = rng or Rng(0)
    y = np.asarray(y, dtype=np.float64)
    origin = m.completion(np.zeros(m.input_dim)).vector()
    k = m.null_dim

    def objective(zs):
        xs = m.completion_inverse(CompletionPoint(np.broadcast_to(y, (len(zs), y.size)), zs))
        d = m.completion(xs).vector() - origin
        return np.sum(d * d, axis=1)

    zs = rng.normal(size=(restarts, k), scale=spread)
    step = 0.5
    for _ in range(iters):
        grad = np.empty_like(zs)
        for j in range(k):
            e = np.zeros(k)
            e[j] = h
            grad[:, j] = (objective(zs + e) - objective(zs - e)) / (2 * h)
        move = step * grad
        zs = zs - move
        if np.max(np.abs(move)) < 1e-9:
            break
    xs = m.completion_inverse(CompletionPoint(np.broadcast_to(y, (restarts, y.size)), zs))
    spread_x = np.max(np.linalg.norm(xs - xs[0], axis=1))
    if spread_x > 1e-4:
        raise OracleDisagreement(f"pre-image restarts disagree by {spread_x:.3e}")
    best = int(np.argmin(objective(zs)))
    return xs[best]


@dataclass
class CouplingMap:
    """Bijective affine coupling ``phi`` with ``phi(0) = 0``."""

    dim: int
    mixer: np.ndarray
    s_net: MlpNet
    t_net: MlpNet

    @classmethod
    def create(cls, dim: int, rng: Rng, hidden: int = 16, scale: float = 0.5) -> "CouplingMap":
        a = dim // 2
        return cls(dim, rng.normal(size=dim * (dim - 1) // 2, scale=scale),
                   MlpNet.create([dim - a, hidden, a], rng, "tanh", "scale_head"),
                   MlpNet.create([dim - a, hidden, a], rng, "tanh", "linear"))

    @classmethod
    def identity(cls, dim: int) -> "CouplingMap":
        m = cls.create(dim, Rng(0))
        m.mixer[:] = 0.0
        for net in (m.s_net, m.t_net):
            net.weights[-1][:] = 0.0
        return m

    def _u(self):
        return linalg.cayley(linalg.skew_from_params(self.mixer, self.dim))

    def __call__(self, x):
        xb, single = _batched(x)
        a = self.dim // 2
        xt = xb @ self._u().T
        xa, xb_ = xt[:, :a], xt[:, a:]
        t0 = self.t_net(np.zeros((1, self.dim - a)))
        out = np.concatenate([xa * self.s_net(xb_) + self.t_net(xb_) - t0, xb_], axis=1)
        return _unbatch(out, single)

    def inverse(self, v):
        vb, single = _batched(v)
        a = self.dim // 2
        va, vb_ = vb[:, :a], vb[:, a:]
        t0 = self.t_net(np.zeros((1, self.dim - a)))
        xa = (va - self.t_net(vb_) + t0) / self.s_net(vb_)
        return _unbatch(np.concatenate([xa, vb_], axis=1) @ self._u(), single)


@dataclass
class CoordinateTestCase:
    """``g = A o phi`` with completion ``G(x) = [A phi(x) | N^T phi(x)]``."""

    phi: CouplingMap
    a: np.ndarray

    def __post_init__(self):
        self.a = linalg.as_matrix(self.a)
        self._basis = linalg.null_space(self.a)
        if self._basis.shape[1] != self.a.shape[1] - self.a.shape[0]:
            raise ValueError("A must have full row rank")
        self._stack = np.vstack([self.a, self._basis.T])

    @classmethod
    def random(cls, rng: Rng, m: int = 2, n: int = 4) -> "CoordinateTestCase":
        return cls(CouplingMap.create(n, rng), rng.normal(size=(m, n)))

    def completion(self, x) -> CompletionPoint:
        v = self.phi(x)
        return CompletionPoint(v @ self.a.T, v @ self._basis)

    def completion_inverse(self, p: CompletionPoint) -> np.ndarray:
        rhs = np.concatenate([np.atleast_2d(p.range), np.atleast_2d(p.null)], axis=1)
        v = np.linalg.solve(self._stack, rhs.T).T
        x = self.phi.inverse(v)
        return x[0] if np.ndim(p.range) == 1 else x

    def natural_pinv(self, y) -> np.ndarray:
        q0 = self.completion(np.zeros(self.a.shape[1])).null
        return self.completion_inverse(CompletionPoint(np.asarray(y, float), q0))


def coordinate_consistency_check(tc: CoordinateTestCase, y) -> float:
    """``||g^+_natural(y) - phi^{-1}(A^+ y)||`` for ``g = A o phi``."""
    expected = tc.phi.inverse(linalg.pinv(tc.a) @ np.asarray(y, float))
    return float(np.linalg.norm(tc.natural_pinv(y) - expected))
