"""Manifold quadrature rules used to check normalisation.

Sphere: Gauss-Legendre in cos(theta) times a uniform rule in phi.
Hyperboloid: polar coordinates in the tangent plane at the origin with area
element sinh(r) dr dphi, Gauss-Legendre in r on [0, r_max].
"""

import math

import numpy as np

from .geometry import Hyperboloid, Manifold, Sphere


def sphere_rule(n_theta=200, n_phi=400):
    c, wc = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * 2 * math.pi / n_phi
    C, P = np.meshgrid(c, phi, indexing="ij")
    s = np.sqrt(1 - C * C)
    pts = np.stack([s * np.cos(P), s * np.sin(P), C], axis=-1).reshape(-1, 3)
    w = (wc[:, None] * np.full(n_phi, 2 * math.pi / n_phi)[None, :]).reshape(-1)
    return pts, w


def hyperboloid_rule(n_r=200, n_phi=200, r_max=6.0, panels=6):
    """Composite Gauss-Legendre in r (``panels`` equal panels) times uniform phi."""
    g, wg = np.polynomial.legendre.leggauss(n_r // panels)
    edges = np.linspace(0.0, r_max, panels + 1)
    r = np.concatenate([(a + b) / 2 + (b - a) / 2 * g for a, b in zip(edges[:-1], edges[1:])])
    wr = np.concatenate([(b - a) / 2 * wg for a, b in zip(edges[:-1], edges[1:])])
    phi = (np.arange(n_phi) + 0.5) * 2 * math.pi / n_phi
    R, P = np.meshgrid(r, phi, indexing="ij")
    pts = np.stack([np.cosh(R), np.sinh(R) * np.cos(P), np.sinh(R) * np.sin(P)], axis=-1).reshape(-1, 3)
    w = (wr * np.sinh(r))[:, None] * np.full(n_phi, 2 * math.pi / n_phi)[None, :]
    return pts, w.reshape(-1)


def _composite(edges, n):
    g, wg = np.polynomial.legendre.leggauss(n)
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1, None], edges[1:, None]
    return ((a + b) / 2 + (b - a) / 2 * g).ravel(), ((b - a) / 2 * wg).ravel()


def tangent_box_rule(M: Manifold, edges_x, edges_y, n=16):
    """Gauss-Legendre panels on a box of frame coordinates at the origin, mapped by exp.

    Panel breakpoints let piecewise-constant densities (checkerboards) be
    integrated exactly up to the smooth exp volume factor.
    """
    u, wu = _composite(edges_x, n)
    v, wv = _composite(edges_y, n)
    U, V = np.meshgrid(u, v, indexing="ij")
    c = np.stack([U, V], axis=-1).reshape(-1, 2)
    E0 = M.frame(M.origin)
    pts = M.exp(M.origin, c @ E0.T)
    vol = np.exp(M.logdet_exp_radius(np.linalg.norm(c, axis=-1)))
    return pts, (wu[:, None] * wv[None, :]).ravel() * vol


def spherical_box_rule(edges_phi, edges_theta, n=16):
    """Gauss-Legendre panels in (phi, theta) on S^2 with area element sin(theta)."""
    p, wp = _composite(edges_phi, n)
    t, wt = _composite(edges_theta, n)
    P, T = np.meshgrid(p, t, indexing="ij")
    st = np.sin(T)
    pts = np.stack([st * np.cos(P), st * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    return pts, (wp[:, None] * wt[None, :] * st).ravel()


def manifold_rule(M: Manifold, **kw):
    if isinstance(M, Sphere) and M.dim == 2:
        return sphere_rule(**kw)
    if isinstance(M, Hyperboloid) and M.dim == 2:
        return hyperboloid_rule(**kw)
    raise ValueError("quadrature rules are provided for S^2 and H^2")


def integrate_density(logpdf, M: Manifold, **kw):
    pts, w = manifold_rule(M, **kw)
    lp = logpdf(pts)
    return float(np.sum(w * np.exp(lp)))
