"""Dense real linear algebra used throughout the package.

Matrices are plain ``float64`` numpy arrays. The singular value decomposition
is a one-sided (Hestenes) Jacobi implementation, which keeps the
pseudo-inverse oracle independent of LAPACK's SVD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = np.finfo(np.float64).eps

SWEEP_LIMIT = 60
ROTATION_TOL = 1e-12


class NumericalError(RuntimeError):
    """Raised when an iterative routine fails to converge or diverges."""


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class SkewGenerator:
    """Free parameters of a skew-symmetric matrix (strict upper triangle, row-major)."""

    dim: int
    params: np.ndarray

    def __post_init__(self):
        n = self.dim * (self.dim - 1) // 2
        if np.shape(self.params) != (n,):
            raise ValueError(f"expected {n} params for dim {self.dim}, got {np.shape(self.params)}")

    @classmethod
    def zeros(cls, dim: int) -> "SkewGenerator":
        return cls(dim, np.zeros(dim * (dim - 1) // 2))

    def matrix(self) -> np.ndarray:
        return skew_from_params(self.params, self.dim)


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def skew_from_params(params: np.ndarray, dim: int) -> np.ndarray:
    s = np.zeros((dim, dim))
    iu = np.triu_indices(dim, k=1)
    s[iu] = params
    s[(iu[1], iu[0])] = -np.asarray(params)
    return s


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``good`` by an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, i] for i in range(k) if good[i]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for i in range(k):
        if good[i]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > 0.5:
                w /= nrm
                basis.append(w)
                out[:, i] = w
                break
    return out


def svd(a) -> SvdResult:
    """Thin SVD ``a = U diag(sigma) V^T`` by one-sided Jacobi rotations.

    Singular values come back sorted in non-increasing order. Columns of U
    belonging to (numerically) zero singular values are filled with an
    orthonormal completion so that ``U^T U = I`` always holds.
    """
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd: input contains non-finite entries")
    m, n = a.shape
    if min(m, n) < 1:
        raise ValueError("svd: empty matrix")
    if m < n:
        r = svd(a.T)
        return SvdResult(r.v, r.sigma, r.u, r.sweeps)

    w = a.copy()
    v = np.eye(n)
    # columns below this squared norm are numerically zero and never rotated
    negligible = (EPS * np.linalg.norm(a)) ** 2
    sweeps = 0
    converged = n == 1
    while not converged:
        if sweeps >= SWEEP_LIMIT:
            raise NumericalError(f"svd: no convergence after {sweeps} sweeps")
        sweeps += 1
        converged = True
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = w[:, i], w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if min(alpha, beta) <= negligible or abs(gamma) <= ROTATION_TOL * np.sqrt(alpha * beta):
                    continue
                converged = False
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                w[:, [i, j]] = np.column_stack((c * wi - s * wj, s * wi + c * wj))
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj

    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    floor = max(m, n) * EPS * (sigma[0] if sigma[0] > 0 else 1.0)
    good = sigma > floor
    u = np.zeros_like(w)
    u[:, good] = w[:, good] / sigma[good]
    if not good.all():
        u = _complete_columns(u, good)
    return SvdResult(u, sigma, v, sweeps)


def pinv(a, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via :func:`svd`.

    Singular values at or below ``rcond * sigma_max`` are treated as zero.
    The default ``rcond`` is ``max(m, n) * eps``.
    """
    a = as_matrix(a)
    m, n = a.shape
    if rcond is None:
        rcond = max(m, n) * EPS
    if rcond < 0:
        raise ValueError("rcond must be non-negative")
    r = svd(a)
    if r.sigma[0] == 0.0:
        return np.zeros((n, m))
    keep = r.sigma > rcond * r.sigma[0]
    inv = np.zeros_like(r.sigma)
    inv[keep] = 1.0 / r.sigma[keep]
    return (r.v * inv) @ r.u.T


def null_space(a, rcond: float | None = None) -> np.ndarray:
    """Orthonormal basis (as columns) of the null space of ``a``."""
    a = as_matrix(a)
    m, n = a.shape
    if rcond is None:
        rcond = max(m, n) * EPS
    full = np.vstack([a, np.zeros((max(n - m, 0), n))]) if m < n else a
    r = svd(full)
    keep = r.sigma > rcond * r.sigma[0] if r.sigma[0] > 0 else np.zeros(r.sigma.shape, bool)
    return r.v[:, ~keep]


def penrose_residuals(a, a_pinv) -> tuple[float, float, float, float]:
    """Frobenius residuals of the four Penrose identities."""
    a = as_matrix(a)
    p = as_matrix(a_pinv)
    ap = a @ p
    pa = p @ a
    return (
        float(np.linalg.norm(ap @ a - a)),
        float(np.linalg.norm(pa @ p - p)),
        float(np.linalg.norm(ap.T - ap)),
        float(np.linalg.norm(pa.T - pa)),
    )


def _check_system(x, y, a):
    a = as_matrix(a)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != a.shape[1] or y.shape[-1] != a.shape[0]:
        raise ValueError(f"shape mismatch: A {a.shape}, x {x.shape}, y {y.shape}")
    return x, y, a


def linear_back_project(x, y, a, a_pinv=None) -> np.ndarray:
    """Closest point to ``x`` on ``{x' : A x' = y}``: ``x + A^+ (y - A x)``.

    Works on single vectors or on batches stacked along the first axis.
    """
    x, y, a = _check_system(x, y, a)
    if a_pinv is None:
        a_pinv = pinv(a)
    return x + (y - x @ a.T) @ a_pinv.T


def iterative_back_project(x0, y, a, h, lam: float, iters: int) -> np.ndarray:
    """Run ``x <- x + lam * H (y - A x)`` exactly ``iters`` times.

    Raises :class:`NumericalError` when the residual grows above ten times its
    initial value.
    """
    x, y, a = _check_system(x0, y, a)
    h = as_matrix(h)
    if h.shape != (a.shape[1], a.shape[0]):
        raise ValueError(f"H must have shape {(a.shape[1], a.shape[0])}, got {h.shape}")
    if lam <= 0:
        raise ValueError("step size must be positive")
    r0 = np.linalg.norm(y - x @ a.T)
    for k in range(iters):
        resid = y - x @ a.T
        x = x + lam * resid @ h.T
        rk = np.linalg.norm(y - x @ a.T)
        if not np.isfinite(rk) or (r0 > 0 and rk > 10.0 * r0):
            raise NumericalError(f"back-projection diverged at iteration {k + 1}: residual {rk:.3e} (initial {r0:.3e})")
    return x


def cayley(gen: SkewGenerator | np.ndarray) -> np.ndarray:
    """Orthogonal matrix ``(I - S)(I + S)^{-1}`` from a skew generator."""
    s = gen.matrix() if isinstance(gen, SkewGenerator) else np.asarray(gen, dtype=np.float64)
    eye = np.eye(s.shape[0])
    # (I - S) and (I + S)^{-1} commute, so solve on the left.
    return np.linalg.solve(eye + s, eye - s)


def cayley_grad(gen: SkewGenerator, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``<upstream, cayley(gen)>`` with respect to ``gen.params``."""
    s = gen.matrix()
    eye = np.eye(gen.dim)
    inv = np.linalg.inv(eye + s)
    u = inv @ (eye - s)
    # dU = -(I + U) dS (I + S)^{-1}
    gs = -(eye + u).T @ upstream @ inv.T
    iu = np.triu_indices(gen.dim, k=1)
    return gs[iu] - gs.T[iu]


def _lead_axes(x: np.ndarray, channels: int, height: int, width: int) -> tuple:
    if x.ndim >= 3 and x.shape[-3:] == (channels, height, width):
        return x.shape[:-3]
    if x.shape[-1] != channels * height * width:
        raise ValueError(f"expected trailing size {channels * height * width}, got shape {x.shape}")
    return x.shape[:-1]


def pixel_unshuffle(x: np.ndarray, channels: int, height: int, width: int, factor: int) -> np.ndarray:
    """Space-to-depth on ``(C, H, W)`` data, returned flattened; leading batch axes are kept.

    ``out[c*f*f + i*f + j, h, w] = in[c, h*f + i, w*f + j]``
    """
    f = factor
    if f < 1 or height % f or width % f:
        raise ValueError(f"({height}, {width}) not divisible by factor {f}")
    x = np.asarray(x)
    lead = _lead_axes(x, channels, height, width)
    z = x.reshape(*lead, channels, height // f, f, width // f, f)
    nd = len(lead)
    z = z.transpose(*range(nd), nd, nd + 2, nd + 4, nd + 1, nd + 3)
    return z.reshape(*lead, channels * height * width)


def pixel_shuffle(x: np.ndarray, channels: int, height: int, width: int, factor: int) -> np.ndarray:
    """Inverse of :func:`pixel_unshuffle`; ``channels/height/width`` describe the *unshuffled-from* layout."""
    f = factor
    if f < 1 or height % f or width % f:
        raise ValueError(f"({height}, {width}) not divisible by factor {f}")
    x = np.asarray(x)
    lead = x.shape[:-1]
    if x.shape[-1] != channels * height * width:
        raise ValueError(f"expected trailing size {channels * height * width}, got shape {x.shape}")
    z = x.reshape(*lead, channels, f, f, height // f, width // f)
    nd = len(lead)
    z = z.transpose(*range(nd), nd, nd + 3, nd + 1, nd + 4, nd + 2)
    return z.reshape(*lead, channels * height * width)
