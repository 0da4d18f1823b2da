"""Riemannian kernels for the hyperboloid and the sphere.

Points and tangent vectors are plain float64 arrays in ambient coordinates,
shape ``(..., n + 1)``; every operation broadcasts over leading axes.
A manifold object carries the kind, dimension and metric, so the same code
paths serve both spaces:

    >>> H = Hyperboloid(2)
    >>> x = H.origin
    >>> y = H.exp(x, np.array([0.0, 1.0, 0.0]))
    >>> np.allclose(H.log(x, y), [0.0, 1.0, 0.0])
    True

Closed forms are written with a curvature sign ``kappa`` (+1 sphere, -1
hyperboloid) and the radial functions ``S(r) = sin r / r`` (resp. sinh),
``W = S'/r`` and ``W1 = W'/r``; each switches to a Taylor series below
``SERIES_RADIUS`` so that no division by a vanishing norm ever happens.
"""

from __future__ import annotations

import math
from math import factorial

import numpy as np

from .errors import DegenerateInputError, DomainError

SERIES_RADIUS = 0.1
ANTIPODE_TOL = 1e-9
MEMBERSHIP_TOL = 1e-9


def _series(r2, kappa, which):
    # coefficients of S, W = S'/r, W1 = W'/r in powers of r^2
    out = np.zeros_like(r2)
    for j in range(8, -1, -1):
        if which == "S":
            c = (-kappa) ** j / factorial(2 * j + 1)
            p = j
        elif which == "W":
            if j == 0:
                continue
            c = (-kappa) ** j * 2 * j / factorial(2 * j + 1)
            p = j - 1
        else:
            if j < 2:
                continue
            c = (-kappa) ** j * 2 * j * (2 * j - 2) / factorial(2 * j + 1)
            p = j - 2
        out = out + c * r2**p
    return out


def radial(r, kappa, which, branch="auto"):
    """Radial helper functions ``S``, ``W`` or ``W1`` at radius ``r``.

    ``branch`` may force "series" or "closed" (used to cross-check the two).
    """
    r = np.asarray(r, dtype=float)
    if branch == "series":
        return _series(r * r, kappa, which)
    small = r < SERIES_RADIUS
    rs = r if branch == "closed" else np.where(small, 1.0, r)
    if kappa > 0:
        sn, cs = np.sin(rs), np.cos(rs)
    else:
        sn, cs = np.sinh(rs), np.cosh(rs)
    if which == "S":
        closed = sn / rs
    elif which == "W":
        closed = (rs * cs - sn) / rs**3
    else:
        closed = (3 * sn - 3 * rs * cs - kappa * rs * rs * sn) / rs**5
    if branch == "closed":
        return closed
    return np.where(small, _series(r * r, kappa, which), closed)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


class Manifold:
    """Constant-curvature model space embedded in R^(n+1)."""

    kind = ""
    kappa = 0
    injectivity_radius = math.inf

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(dim)
        self.ambient_dim = self.dim + 1

    def __repr__(self):
        return f"{type(self).__name__}({self.dim})"

    def __eq__(self, other):
        return type(self) is type(other) and self.dim == other.dim

    def __hash__(self):
        return hash((self.kind, self.dim))

    # metric -----------------------------------------------------------------
    @property
    def metric_diag(self) -> np.ndarray:
        raise NotImplementedError

    def lower(self, v):
        """Apply the metric to ``v`` (turns a vector into its dot-product covector)."""
        return v * self.metric_diag

    def inner(self, u, v):
        return _dot(self.lower(u), v)

    def norm(self, v):
        return np.sqrt(np.maximum(self.inner(v, v), 0.0))

    def _check_dims(self, *arrays):
        for a in arrays:
            if np.shape(a)[-1] != self.ambient_dim:
                raise ValueError(
                    f"expected ambient dimension {self.ambient_dim}, got {np.shape(a)[-1]}"
                )

    def metric_inner(self, x, u, v):
        """Metric pairing of tangent vectors ``u``, ``v`` based at ``x``."""
        self._check_dims(x, u, v)
        if np.shape(u) != np.shape(v):
            raise ValueError("tangent vectors have mismatched shapes")
        return self.inner(u, v)

    # membership ---------------------------------------------------------------
    def membership_error(self, x):
        raise NotImplementedError

    def tangency_error(self, x, v):
        return np.abs(self.inner(x, v))

    def check_point(self, x, tol=MEMBERSHIP_TOL):
        err = np.max(self.membership_error(x))
        if not err <= tol:
            raise DomainError(f"point is off the manifold by {err:.3g}")

    # core maps ------------------------------------------------------------------
    def exp(self, x, v):
        r = self.norm(v)[..., None]
        return self._cos(r) * x + radial(r, self.kappa, "S") * v

    def _cos(self, r):
        return np.cos(r) if self.kappa > 0 else np.cosh(r)

    def _log_parts(self, x, y):
        """Return (w, s, theta): unnormalised direction, its norm and the distance."""
        raise NotImplementedError

    def log(self, x, y):
        self._check_dims(x, y)
        w, _, theta = self._log_parts(x, y)
        return w / radial(theta, self.kappa, "S")[..., None]

    def dist(self, x, y):
        return self._log_parts(x, y)[2]

    def transport(self, x, y, v):
        raise NotImplementedError

    def proj_tangent(self, x, u):
        # u - kappa <x,u> x  with <x,x> = kappa
        return u - self.kappa * self.inner(x, u)[..., None] * x

    def project(self, u):
        raise NotImplementedError

    def logdet_exp_radius(self, r):
        """(n-1) log S(r): log volume distortion of exp at tangent norm ``r``."""
        r = np.asarray(r, dtype=float)
        if self.kappa > 0 and np.any(r >= math.pi):
            raise DomainError("exp map is singular at tangent norm >= pi on the sphere")
        return (self.dim - 1) * np.log(radial(r, self.kappa, "S"))

    def logdet_exp(self, x, v):
        return self.logdet_exp_radius(self.norm(v))

    def logdet_log(self, x, y):
        return -self.logdet_exp_radius(self.dist(x, y))

    def log_jacobian(self, x, y, branch="auto"):
        """Ambient derivative of ``y -> log_x(y)``, shape (..., n+1, n+1).

        ``branch`` selects the closed-form or the series radial functions;
        the default switches at ``SERIES_RADIUS``.
        """
        self._check_dims(x, y)
        w, s, theta = self._log_parts(x, y)
        S = radial(theta, self.kappa, "S", branch)
        W = radial(theta, self.kappa, "W", branch)
        g = self.kappa * self.lower(x)
        eye = np.eye(self.ambient_dim)
        c1 = (self.kappa * W / S**3)[..., None, None]
        c2 = (1.0 / S)[..., None, None]
        return c1 * w[..., :, None] * g[..., None, :] + c2 * (eye - x[..., :, None] * g[..., None, :])

    # frames and exp-map charts ----------------------------------------------------
    def origin_like(self, shape=()):
        return np.broadcast_to(self.origin, tuple(shape) + (self.ambient_dim,)).copy()

    def _frame_order(self, x):
        raise NotImplementedError

    def frame(self, x):
        """Orthonormal tangent frame at ``x``, shape (..., n+1, n).

        Gram-Schmidt (under the metric) on the projected standard basis with
        the most normal basis vector dropped; order is deterministic.
        """
        x = np.asarray(x, dtype=float)
        d = self.ambient_dim
        eye = np.eye(d)
        keep = self._frame_order(x)  # (..., n) indices
        cand = eye[keep]  # (..., n, d)
        cand = self.proj_tangent(x[..., None, :], cand)
        basis = []
        for k in range(self.dim):
            v = cand[..., k, :]
            for b in basis:
                v = v - self.inner(b, v)[..., None] * b
            v = v / self.norm(v)[..., None]
            basis.append(v)
        return np.stack(basis, axis=-1)

    def coords(self, frame, v):
        """Frame coordinates of the tangent vector ``v``."""
        return np.einsum("...dn,...d->...n", frame, self.lower(v))

    def chart(self, x, frame, y):
        """exp_x(frame @ y)."""
        r = np.linalg.norm(y, axis=-1)[..., None]
        ey = np.einsum("...dn,...n->...d", frame, y)
        return self._cos(r) * x + radial(r, self.kappa, "S") * ey

    def chart_jacobian(self, x, frame, y):
        """Derivative of ``chart`` in ``y``, shape (..., n+1, n)."""
        r = np.linalg.norm(y, axis=-1)
        S = radial(r, self.kappa, "S")[..., None, None]
        W = radial(r, self.kappa, "W")[..., None, None]
        ey = np.einsum("...dn,...n->...d", frame, y)
        u = -self.kappa * S
        return u * x[..., :, None] * y[..., None, :] + W * ey[..., :, None] * y[..., None, :] + S * frame

    def chart_second(self, x, frame, y, v, alpha):
        """Covector ``q -> alpha . D^2 chart(y)[v, q]``, shape (..., n)."""
        r = np.linalg.norm(y, axis=-1)
        S = radial(r, self.kappa, "S")[..., None]
        W = radial(r, self.kappa, "W")[..., None]
        W1 = radial(r, self.kappa, "W1")[..., None]
        u, u1 = -self.kappa * S, -self.kappa * W
        ax = _dot(alpha, x)[..., None]
        aE = np.einsum("...d,...dn->...n", alpha, frame)
        aEy = _dot(aE, y)[..., None]
        aEv = _dot(aE, v)[..., None]
        yv = _dot(y, v)[..., None]
        return (
            (u1 * yv * ax + W1 * yv * aEy) * y
            + (u * ax + W * aEy) * v
            + W * yv * aE
            + W * aEv * y
        )

    def chart_logdet_grad(self, y):
        """Gradient and Hessian of ``y -> logdet_exp(|y|)`` in frame coordinates."""
        r = np.linalg.norm(y, axis=-1)
        S = radial(r, self.kappa, "S")
        W = radial(r, self.kappa, "W")
        W1 = radial(r, self.kappa, "W1")
        k = self.dim - 1
        grad = k * (W / S)[..., None] * y
        n = y.shape[-1]
        hess = k * (
            (W / S)[..., None, None] * np.eye(n)
            + ((W1 * S - W * W) / (S * S))[..., None, None] * y[..., :, None] * y[..., None, :]
        )
        return grad, hess


class Hyperboloid(Manifold):
    """Hyperboloid model {x : <x,x>_L = -1, x_0 > 0} with the Lorentz metric."""

    kind = "hyperboloid"
    kappa = -1
    injectivity_radius = math.inf

    @property
    def metric_diag(self):
        g = np.ones(self.ambient_dim)
        g[0] = -1.0
        return g

    @property
    def origin(self):
        o = np.zeros(self.ambient_dim)
        o[0] = 1.0
        return o

    def membership_error(self, x):
        return np.maximum(np.abs(self.inner(x, x) + 1.0), np.where(x[..., 0] > 0, 0.0, np.inf))

    def _log_parts(self, x, y):
        alpha = -self.inner(x, y)
        w = y - alpha[..., None] * x
        s = self.norm(w)
        return w, s, np.arcsinh(s)

    def transport(self, x, y, v):
        self._check_dims(x, y, v)
        alpha = -self.inner(x, y)
        return v + (self.inner(y, v) / (1.0 + alpha))[..., None] * (x + y)

    def project(self, u):
        u = np.asarray(u, dtype=float)
        q = -self.inner(u, u)
        if np.any(q <= 0) or np.any(u[..., 0] <= 0):
            raise DomainError("only future-timelike vectors can be rescaled onto the hyperboloid")
        return u / np.sqrt(q)[..., None]

    def _frame_order(self, x):
        idx = np.arange(1, self.ambient_dim)
        return np.broadcast_to(idx, x.shape[:-1] + (self.dim,))

    def stereographic(self, x):
        """Poincare-ball image ``x_rest / (1 + x_0)`` of a point on H^n."""
        x = np.asarray(x, dtype=float)
        return x[..., 1:] / (1.0 + x[..., :1])

    def from_poincare(self, p):
        p = np.asarray(p, dtype=float)
        sq = np.sum(p * p, axis=-1, keepdims=True)
        return np.concatenate([(1 + sq), 2 * p], axis=-1) / (1 - sq)


class Sphere(Manifold):
    """Unit sphere with the round metric."""

    kind = "sphere"
    kappa = 1
    injectivity_radius = math.pi

    @property
    def metric_diag(self):
        return np.ones(self.ambient_dim)

    @property
    def origin(self):
        o = np.zeros(self.ambient_dim)
        o[0] = -1.0
        return o

    def membership_error(self, x):
        return np.abs(np.linalg.norm(x, axis=-1) - 1.0)

    def _log_parts(self, x, y):
        r = _dot(x, y)
        if np.any(r <= -1.0 + ANTIPODE_TOL):
            raise DomainError("log map undefined at the antipode")
        w = y - r[..., None] * x
        s = np.linalg.norm(w, axis=-1)
        return w, s, np.arctan2(s, r)

    def transport(self, x, y, v):
        self._check_dims(x, y, v)
        r = _dot(x, y)
        if np.any(r <= -1.0 + ANTIPODE_TOL):
            raise DomainError("parallel transport undefined between antipodal points")
        return v - (_dot(y, v) / (1.0 + r))[..., None] * (x + y)

    def project(self, u):
        u = np.asarray(u, dtype=float)
        nrm = np.linalg.norm(u, axis=-1)
        if np.any(nrm == 0):
            raise DegenerateInputError("cannot project the zero vector onto the sphere")
        return u / nrm[..., None]

    def _frame_order(self, x):
        d = self.ambient_dim
        drop = np.argmax(np.abs(x), axis=-1)
        idx = np.arange(d - 1)
        return idx + (idx >= drop[..., None])

    def mollweide(self, x, return_residual=False):
        """Mollweide plane coordinates of points on S^2.

        Latitude is ``arcsin(x_2)``, longitude ``atan2(x_1, x_0)``; the
        auxiliary angle solves ``2b + sin 2b = pi sin(lat)`` by Newton.
        """
        if self.dim != 2:
            raise ValueError("Mollweide projection needs S^2")
        x = np.asarray(x, dtype=float)
        lat = np.arcsin(np.clip(x[..., 2], -1.0, 1.0))
        lon = np.arctan2(x[..., 1], x[..., 0])
        beta, resid = solve_mollweide_beta(lat)
        xy = np.stack([2 * math.sqrt(2) / math.pi * lon * np.cos(beta), math.sqrt(2) * np.sin(beta)], axis=-1)
        return (xy, resid) if return_residual else xy


def solve_mollweide_beta(lat, tol=1e-10, max_iter=50):
    """Newton solve of ``2b + sin 2b = pi sin(lat)`` starting from ``b = lat``."""
    lat = np.asarray(lat, dtype=float)
    target = math.pi * np.sin(lat)
    beta = lat.copy()
    pole = np.abs(np.abs(lat) - math.pi / 2) < 1e-12
    beta = np.where(pole, np.sign(lat) * math.pi / 2, beta)
    for _ in range(max_iter):
        resid = 2 * beta + np.sin(2 * beta) - target
        active = (np.abs(resid) >= tol) & ~pole
        if not np.any(active):
            break
        deriv = 2 + 2 * np.cos(2 * beta)
        step = np.where(active, resid / np.where(deriv > 0, deriv, 1.0), 0.0)
        beta = np.clip(beta - step, -math.pi / 2, math.pi / 2)
    resid = np.where(pole, 0.0, 2 * beta + np.sin(2 * beta) - target)
    return beta, resid


def get_manifold(name: str) -> Manifold:
    """Parse names like ``h2`` / ``s2`` / ``hyperboloid3``."""
    name = name.lower()
    for prefix, cls in (("hyperboloid", Hyperboloid), ("sphere", Sphere), ("h", Hyperboloid), ("s", Sphere)):
        if name.startswith(prefix):
            rest = name[len(prefix):]
            if rest.isdigit():
                return cls(int(rest))
    raise ValueError(f"unknown manifold {name!r}")


def manifold_name(m: Manifold) -> str:
    return ("h" if m.kind == "hyperboloid" else "s") + str(m.dim)


# Free-function forms taking the manifold first.

def metric_inner(m: Manifold, x, u, v):
    return m.metric_inner(x, u, v)


def exp_map(m: Manifold, x, v):
    return m.exp(x, v)


def log_map(m: Manifold, x, y):
    return m.log(x, y)


def parallel_transport(m: Manifold, x, y, v):
    return m.transport(x, y, v)


def tangent_project(m: Manifold, x, u):
    return m.proj_tangent(x, u)


def logdet_exp(m: Manifold, x, v):
    return m.logdet_exp(x, v)


def log_map_jacobian(m: Manifold, x, y, branch="auto"):
    return m.log_jacobian(x, y, branch)


def project_to_manifold(m: Manifold, u):
    return m.project(u)


def stereographic_project(x):
    return Hyperboloid(2).stereographic(x)


def mollweide_project(x):
    return Sphere(2).mollweide(x)
