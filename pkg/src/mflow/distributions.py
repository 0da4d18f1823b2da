"""Base distributions and target densities on the hyperboloid and the sphere.

Every density object exposes ``sample(count, rng)``, ``logpdf(x)`` and
``to_dict()``; base distributions additionally provide ``grad_logpdf(x)``
(an ambient covector whose tangential part is the Riemannian gradient).
All densities are normalised with respect to the Riemannian volume.

Named targets (``target_from_name``):

    c1-row1 .. c1-row4   hyperboloid targets
    c1-sph1 .. c1-sph3   sphere targets
    appd-antipodal       concentrated vMF at the antipode of the base mean
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

from .errors import DomainError
from .geometry import Hyperboloid, Manifold, Sphere, get_manifold, manifold_name, radial


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _points(x, M):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != M.ambient_dim:
        raise ValueError(f"expected points with {M.ambient_dim} coordinates, got {x.shape[-1]}")
    return x


class Density:
    manifold: Manifold
    normalized = True

    def sample(self, count=None, rng=None):
        rng = _as_rng(rng)
        out = self._sample(1 if count is None else int(count), rng)
        return out[0] if count is None else out

    def _sample(self, count, rng):
        raise NotImplementedError

    def logpdf(self, x):
        raise NotImplementedError

    def grad_logpdf(self, x):
        raise TypeError(f"{type(self).__name__} has no gradient")

    def to_dict(self):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# wrapped normal

class WrappedNormal(Density):
    """exp_mu(PT_{mu0 -> mu}(E0 v)) with v ~ N(0, cov) in the frame E0 at the origin.

    On the sphere draws with ``|v| >= pi`` are rejected and the density is
    renormalised by the retained mass (exactly for isotropic covariances).
    """

    def __init__(self, manifold: Manifold, mean, cov):
        self.manifold = M = manifold
        self.mean = np.asarray(mean, dtype=float)
        M.check_point(self.mean)
        n = M.dim
        cov = np.asarray(cov, dtype=float)
        cov = cov * np.eye(n) if cov.ndim == 0 else (np.diag(cov) if cov.ndim == 1 else cov)
        if cov.shape != (n, n) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric n x n matrix")
        eig = np.linalg.eigvalsh(cov)
        if not np.all(eig > 0):
            raise ValueError("covariance must be positive definite")
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self.prec = np.linalg.inv(cov)
        self.origin = M.origin
        self.E0 = M.frame(self.origin)
        self._lognorm = -0.5 * n * math.log(2 * math.pi) - 0.5 * float(np.sum(np.log(eig)))
        self._log_kept = 0.0
        if isinstance(M, Sphere):
            if np.allclose(cov, eig[0] * np.eye(n)):
                self._log_kept = float(stats.chi2.logcdf(math.pi**2 / eig[0], n))
        # transport matrices between the origin and the mean (linear in the vector)
        eye = np.eye(M.ambient_dim)
        self._to_mean = M.transport(self.origin[None], self.mean[None], eye).T
        self._to_origin = M.transport(self.mean[None], self.origin[None], eye).T

    def _sample(self, count, rng):
        M = self.manifold
        n = M.dim
        v = rng.standard_normal((count, n)) @ self.chol.T
        if isinstance(M, Sphere):
            bad = np.linalg.norm(v, axis=-1) >= math.pi
            while np.any(bad):
                v[bad] = rng.standard_normal((int(bad.sum()), n)) @ self.chol.T
                bad = np.linalg.norm(v, axis=-1) >= math.pi
        u0 = v @ self.E0.T
        u = u0 @ self._to_mean.T
        return M.exp(self.mean, u)

    def _parts(self, x):
        M = self.manifold
        u = M.log(self.mean, x)
        v = M.coords(self.E0, u @ self._to_origin.T)
        return u, v

    def logpdf(self, x):
        M = self.manifold
        x = _points(x, M)
        u, v = self._parts(x)
        r = M.norm(u)
        if isinstance(M, Sphere):
            inside = r < math.pi
            r = np.where(inside, r, 0.0)
        quad = np.einsum("...i,ij,...j->...", v, self.prec, v)
        lp = self._lognorm - 0.5 * quad - M.logdet_exp_radius(r) - self._log_kept
        if isinstance(M, Sphere):
            lp = np.where(inside, lp, -np.inf)
        return lp

    def grad_logpdf(self, x):
        M = self.manifold
        x = _points(x, M)
        u, v = self._parts(x)
        r = M.norm(u)
        S = radial(r, M.kappa, "S")
        W = radial(r, M.kappa, "W")
        gv = -(v @ self.prec)  # d logN / dv
        # v = E0^T G T u  =>  d/du = gv E0^T G T
        gu = ((gv @ self.E0.T) * M.metric_diag) @ self._to_origin
        gu = gu - ((M.dim - 1) * W / S)[..., None] * M.lower(u)
        return np.einsum("...d,...de->...e", gu, M.log_jacobian(self.mean, x))

    def to_dict(self):
        return {
            "family": "wrapped_normal",
            "manifold": manifold_name(self.manifold),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
        }


def wrapped_normal_sample(spec: WrappedNormal, rng, count=None):
    return spec.sample(count, rng)


def wrapped_normal_logpdf(spec: WrappedNormal, x):
    return spec.logpdf(x)


# ---------------------------------------------------------------------------
# von Mises-Fisher

def vmf_log_normalizer(kappa, p):
    """log C_p(kappa) for the vMF density on S^(p-1) in R^p."""
    kappa = float(kappa)
    if kappa == 0.0:
        return -(math.log(2.0) + 0.5 * p * math.log(math.pi) - special.gammaln(0.5 * p))
    if p == 3:
        log_sinh = kappa + math.log1p(-math.exp(-2.0 * kappa)) - math.log(2.0)
        return math.log(kappa) - math.log(4 * math.pi) - log_sinh
    nu = 0.5 * p - 1.0
    return nu * math.log(kappa) - 0.5 * p * math.log(2 * math.pi) - (math.log(special.ive(nu, kappa)) + kappa)


class Vmf(Density):
    """von Mises-Fisher density ``C(kappa) exp(kappa mu.z)`` on the sphere."""

    def __init__(self, mean, kappa, manifold: Manifold = None):
        mean = np.asarray(mean, dtype=float)
        self.manifold = manifold if manifold is not None else Sphere(mean.size - 1)
        if not isinstance(self.manifold, Sphere):
            raise ValueError("vMF lives on the sphere")
        if abs(np.linalg.norm(mean) - 1.0) > 1e-9:
            raise ValueError("vMF mean direction must have unit norm")
        if kappa < 0:
            raise ValueError("concentration must be >= 0")
        self.mean = mean
        self.kappa = float(kappa)
        self._logc = vmf_log_normalizer(self.kappa, mean.size)

    def _sample(self, count, rng):
        p = self.mean.size
        k = self.kappa
        d = p - 1
        if k == 0.0:
            g = rng.standard_normal((count, p))
            return g / np.linalg.norm(g, axis=-1, keepdims=True)
        # Wood's rejection sampler for w = mu.z
        b = d / (2 * k + math.sqrt(4 * k * k + d * d))
        x0 = (1 - b) / (1 + b)
        c = k * x0 + d * math.log(1 - x0 * x0)
        w = np.empty(count)
        todo = np.arange(count)
        while todo.size:
            m = todo.size
            zb = rng.beta(d / 2, d / 2, size=m)
            ww = (1 - (1 + b) * zb) / (1 - (1 - b) * zb)
            u = rng.uniform(size=m)
            ok = k * ww + d * np.log1p(-x0 * ww) - c >= np.log(u)
            w[todo[ok]] = ww[ok]
            todo = todo[~ok]
        g = rng.standard_normal((count, d))
        g /= np.linalg.norm(g, axis=-1, keepdims=True)
        z = np.concatenate([w[:, None], np.sqrt(np.maximum(1 - w * w, 0.0))[:, None] * g], axis=-1)
        # Householder reflection taking e1 to mu
        e1 = np.zeros(p)
        e1[0] = 1.0
        h = e1 - self.mean
        nh = np.linalg.norm(h)
        if nh > 1e-12:
            h = h / nh
            z = z - 2 * (z @ h)[:, None] * h
        return z

    def logpdf(self, x):
        x = _points(x, self.manifold)
        return self._logc + self.kappa * (x @ self.mean)

    def grad_logpdf(self, x):
        x = _points(x, self.manifold)
        return np.broadcast_to(self.kappa * self.mean, x.shape).copy()

    def to_dict(self):
        return {
            "family": "vmf",
            "manifold": manifold_name(self.manifold),
            "mean": self.mean.tolist(),
            "kappa": self.kappa,
        }


def vmf_sample(spec: Vmf, rng, count=None):
    return spec.sample(count, rng)


def vmf_logpdf(spec: Vmf, x):
    return spec.logpdf(x)


# ---------------------------------------------------------------------------
# mixtures

class Mixture(Density):
    def __init__(self, weights, components):
        w = np.asarray(weights, dtype=float)
        if len(components) == 0 or w.shape != (len(components),):
            raise ValueError("need one weight per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.weights = w
        self.components = list(components)
        self.manifold = components[0].manifold
        if any(c.manifold != self.manifold for c in components):
            raise ValueError("mixture components live on different manifolds")

    def _sample(self, count, rng):
        idx = rng.choice(len(self.components), size=count, p=self.weights)
        out = np.empty((count, self.manifold.ambient_dim))
        for k, comp in enumerate(self.components):
            sel = idx == k
            if np.any(sel):
                out[sel] = comp._sample(int(sel.sum()), rng)
        return out

    def _component_logs(self, x):
        with np.errstate(divide="ignore"):
            return np.stack([np.log(w) + c.logpdf(x) for w, c in zip(self.weights, self.components)], axis=-1)

    def logpdf(self, x):
        return special.logsumexp(self._component_logs(x), axis=-1)

    def grad_logpdf(self, x):
        lc = self._component_logs(x)
        resp = np.exp(lc - special.logsumexp(lc, axis=-1, keepdims=True))
        grads = np.stack([c.grad_logpdf(x) for c in self.components], axis=-2)
        return np.einsum("...k,...kd->...d", resp, grads)

    def to_dict(self):
        return {
            "family": "mixture",
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }


class ProjectedGaussianMixture(Density):
    """Euclidean Gaussian mixture in the frame at the origin, pushed forward by exp."""

    def __init__(self, manifold: Manifold, means, covs, weights=None):
        self.manifold = M = manifold
        self.means = np.asarray(means, dtype=float)
        k, n = self.means.shape
        if n != M.dim:
            raise ValueError("tangent means must have the manifold dimension")
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 0:
            covs = np.broadcast_to(covs * np.eye(n), (k, n, n))
        self.covs = np.array(covs, dtype=float)
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        self.origin = M.origin
        self.E0 = M.frame(self.origin)
        self._gauss = [stats.multivariate_normal(m, c) for m, c in zip(self.means, self.covs)]
        self._chols = [np.linalg.cholesky(c) for c in self.covs]

    def _sample(self, count, rng):
        M = self.manifold
        idx = rng.choice(len(self.weights), size=count, p=self.weights)
        v = np.empty((count, M.dim))
        for k in range(len(self.weights)):
            sel = idx == k
            if np.any(sel):
                v[sel] = self.means[k] + rng.standard_normal((int(sel.sum()), M.dim)) @ self._chols[k].T
        if isinstance(M, Sphere):
            bad = np.linalg.norm(v, axis=-1) >= math.pi
            if np.any(bad):
                raise DomainError("projected Gaussian draw beyond the sphere's injectivity radius")
        return M.exp(self.origin, v @ self.E0.T)

    def logpdf(self, x):
        M = self.manifold
        x = _points(x, M)
        v = M.coords(self.E0, M.log(self.origin, x))
        comps = np.stack([np.log(w) + g.logpdf(v) for w, g in zip(self.weights, self._gauss)], axis=-1)
        return special.logsumexp(comps, axis=-1) - M.logdet_exp_radius(np.linalg.norm(v, axis=-1))

    def to_dict(self):
        return {
            "family": "projected_gaussian_mixture",
            "manifold": manifold_name(self.manifold),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "weights": self.weights.tolist(),
        }


# ---------------------------------------------------------------------------
# checkerboards

def _cell_index(v, lo, side, cells):
    return np.floor((v - lo) / side).astype(int), (v >= lo) & (v < lo + side * cells)


class TangentCheckerboard(Density):
    """Uniform checkerboard in frame coordinates at the origin, pushed forward by exp.

    The board has ``cells x cells`` squares of side ``side`` placed so that the
    square in the second row from the top and third column from the left has
    its lower-left corner at ``anchor``; that square and every square of the
    same colour carry mass.
    """

    def __init__(self, manifold: Manifold, anchor=(0.0, 0.0), side=1.5, cells=4):
        if manifold.dim != 2:
            raise ValueError("the tangent checkerboard is defined on 2-manifolds")
        if side <= 0 or cells < 1:
            raise ValueError("side and cell count must be positive")
        self.manifold = M = manifold
        self.anchor = np.asarray(anchor, dtype=float)
        self.side = float(side)
        self.cells = int(cells)
        self.lo = self.anchor - np.array([2.0, cells - 2.0]) * self.side
        ref = (2, cells - 2)
        ii, jj = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
        self.live = (ii + jj) % 2 == (ref[0] + ref[1]) % 2  # [col, row]
        self.live_cells = np.argwhere(self.live)
        self.area = len(self.live_cells) * self.side**2
        self.E0 = M.frame(M.origin)

    def _sample(self, count, rng):
        M = self.manifold
        pick = self.live_cells[rng.integers(len(self.live_cells), size=count)]
        v = self.lo + (pick + rng.uniform(size=(count, 2))) * self.side
        return M.exp(M.origin, v @ self.E0.T)

    def logpdf(self, x):
        M = self.manifold
        x = _points(x, M)
        v = M.coords(self.E0, M.log(M.origin, x))
        idx, ok = _cell_index(v, self.lo, self.side, self.cells)
        ok = np.all(ok, axis=-1)
        idx = np.where(ok[..., None], idx, 0)
        on = ok & self.live[idx[..., 0], idx[..., 1]]
        r = np.linalg.norm(v, axis=-1)
        lp = -math.log(self.area) - M.logdet_exp_radius(np.where(on, r, 0.0))
        return np.where(on, lp, -np.inf)

    def to_dict(self):
        return {
            "family": "tangent_checkerboard",
            "manifold": manifold_name(self.manifold),
            "anchor": self.anchor.tolist(),
            "side": self.side,
            "cells": self.cells,
        }


def spherical_coords(x):
    """(phi, theta) in [0, 2 pi) x [0, pi] with x = (sin t cos p, sin t sin p, cos t)."""
    x = np.asarray(x, dtype=float)
    phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * math.pi)
    theta = np.arccos(np.clip(x[..., 2], -1.0, 1.0))
    return phi, theta


def from_spherical(phi, theta):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


class SphericalCheckerboard(Density):
    """Uniform (area-weighted) checkerboard in spherical coordinates on S^2.

    Same placement rule as TangentCheckerboard: the rectangle in the second
    row from the top (largest theta first) and third column has its
    lower-left corner at ``anchor = (phi, theta)``.
    """

    def __init__(self, anchor=(math.pi, math.pi / 2), side_phi=math.pi / 2 - 0.2,
                 side_theta=math.pi / 4 - 0.1, cells=4):
        if side_phi <= 0 or side_theta <= 0:
            raise ValueError("side lengths must be positive")
        self.manifold = Sphere(2)
        self.anchor = np.asarray(anchor, dtype=float)
        self.side = np.array([side_phi, side_theta], dtype=float)
        self.cells = int(cells)
        self.lo = self.anchor - np.array([2.0, cells - 2.0]) * self.side
        hi = self.lo + cells * self.side
        if self.lo[0] < 0 or hi[0] > 2 * math.pi + 1e-12 or self.lo[1] < 0 or hi[1] > math.pi + 1e-12:
            raise ValueError("checkerboard does not fit in [0, 2pi] x [0, pi]")
        ii, jj = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
        ref = (2, cells - 2)
        self.live = (ii + jj) % 2 == (ref[0] + ref[1]) % 2
        self.live_cells = np.argwhere(self.live)
        t0 = self.lo[1] + self.live_cells[:, 1] * self.side[1]
        self.cell_areas = self.side[0] * (np.cos(t0) - np.cos(t0 + self.side[1]))
        self.area = float(self.cell_areas.sum())

    def _sample(self, count, rng):
        pick = rng.choice(len(self.live_cells), size=count, p=self.cell_areas / self.area)
        cells = self.live_cells[pick]
        phi = self.lo[0] + (cells[:, 0] + rng.uniform(size=count)) * self.side[0]
        t0 = self.lo[1] + cells[:, 1] * self.side[1]
        c0, c1 = np.cos(t0), np.cos(t0 + self.side[1])
        theta = np.arccos(c0 + rng.uniform(size=count) * (c1 - c0))
        return from_spherical(phi, theta)

    def logpdf(self, x):
        x = _points(x, self.manifold)
        phi, theta = spherical_coords(x)
        v = np.stack([phi, theta], axis=-1)
        idx, ok = _cell_index(v, self.lo, self.side, self.cells)
        ok = np.all(ok, axis=-1)
        idx = np.where(ok[..., None], idx, 0)
        on = ok & self.live[idx[..., 0], idx[..., 1]]
        return np.where(on, -math.log(self.area), -np.inf)

    def to_dict(self):
        return {
            "family": "spherical_checkerboard",
            "anchor": self.anchor.tolist(),
            "side_phi": float(self.side[0]),
            "side_theta": float(self.side[1]),
            "cells": self.cells,
        }


# ---------------------------------------------------------------------------
# named targets, (de)serialisation

def _tangent_point(M, coords):
    E0 = M.frame(M.origin)
    return M.exp(M.origin, E0 @ np.asarray(coords, dtype=float))


def default_base(manifold: Manifold) -> Density:
    """Standard wrapped normal on the hyperboloid, vMF(mu0, 1) on the sphere."""
    if isinstance(manifold, Hyperboloid):
        return WrappedNormal(manifold, manifold.origin, np.eye(manifold.dim))
    return Vmf(manifold.origin, 1.0, manifold)


TARGET_NAMES = ("c1-row1", "c1-row2", "c1-row3", "c1-row4", "c1-sph1", "c1-sph2", "c1-sph3", "appd-antipodal")


def target_from_name(name: str) -> Density:
    H, S = Hyperboloid(2), Sphere(2)
    r3 = 1 / math.sqrt(3)
    if name == "c1-row1":
        return WrappedNormal(H, _tangent_point(H, [-1.0, 1.0]), 0.75 * np.eye(2))
    if name == "c1-row2":
        means = [[3, 0], [-3, 0], [0, 3], [0, -3], [0, 0]]
        return ProjectedGaussianMixture(H, means, 0.5)
    if name == "c1-row3":
        return TangentCheckerboard(H, (0.0, 0.0), 1.5)
    if name == "c1-row4":
        s, s1, s2 = 1.3, 0.3, 1.5
        comps = [
            WrappedNormal(H, H.exp(H.origin, np.array([0.0, s, s])), np.diag([s1, s2])),
            WrappedNormal(H, H.exp(H.origin, np.array([0.0, -s, -s])), np.diag([s1, s2])),
            WrappedNormal(H, H.exp(H.origin, np.array([0.0, -s, s])), np.diag([s2, s1])),
            WrappedNormal(H, H.exp(H.origin, np.array([0.0, s, -s])), np.diag([s2, s1])),
        ]
        return Mixture(np.full(4, 0.25), comps)
    if name == "c1-sph1":
        return WrappedNormal(S, r3 * np.array([-1.0, -1.0, -1.0]), 0.3 * np.eye(2))
    if name == "c1-sph2":
        means = [[1, 1, 1], [-1, -1, -1], [-1, -1, 1], [1, 1, -1]]
        return Mixture(np.full(4, 0.25), [WrappedNormal(S, r3 * np.array(m, float), 0.3 * np.eye(2)) for m in means])
    if name == "c1-sph3":
        return SphericalCheckerboard()
    if name == "appd-antipodal":
        return Vmf(np.array([1.0, 0.0, 0.0]), 30.0, S)
    raise ValueError(f"unknown target {name!r}; choose from {', '.join(TARGET_NAMES)}")


def antipodal_base() -> Density:
    return Vmf(np.array([-1.0, 0.0, 0.0]), 3.0, Sphere(2))


def density_from_dict(d: dict) -> Density:
    if not isinstance(d, dict):
        raise ValueError("density spec must be a JSON object")
    if "name" in d:
        return target_from_name(d["name"])
    fam = d.get("family")
    try:
        if fam == "wrapped_normal":
            return WrappedNormal(get_manifold(d["manifold"]), d["mean"], d["cov"])
        if fam == "vmf":
            return Vmf(d["mean"], d["kappa"], get_manifold(d.get("manifold", "s2")))
        if fam == "mixture":
            return Mixture(d["weights"], [density_from_dict(c) for c in d["components"]])
        if fam == "projected_gaussian_mixture":
            return ProjectedGaussianMixture(get_manifold(d["manifold"]), d["means"], d["covs"], d.get("weights"))
        if fam == "tangent_checkerboard":
            return TangentCheckerboard(get_manifold(d["manifold"]), d["anchor"], d["side"], d.get("cells", 4))
        if fam == "spherical_checkerboard":
            return SphericalCheckerboard(d["anchor"], d["side_phi"], d["side_theta"], d.get("cells", 4))
    except KeyError as exc:
        raise ValueError(f"density spec for {fam!r} is missing field {exc}") from None
    raise ValueError(f"unknown density family {fam!r}")


def target_sample(spec: Density, rng, count=None):
    return spec.sample(count, rng)


def target_logpdf(spec: Density, x):
    """Log-density and whether it is normalised (always true here)."""
    return spec.logpdf(x), spec.normalized
