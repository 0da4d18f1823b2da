"""Learnable time-dependent vector field and its chart pullbacks.

The field is a small tanh MLP evaluated on ``[z, t]``. In ambient mode its
output ``h`` is projected onto the tangent space, ``f = P_z h``; in
tangent-direct mode (hyperboloid, one chart at the origin) the output is the
chart-coordinate velocity itself.

Everything the solvers need is computed in closed form from the kernel's
forward tangents and its reverse-over-forward pass: the chart velocity
``g = (B^T G B)^-1 B^T G f`` with ``B`` the exp-chart Jacobian, its exact
trace, and vector-Jacobian products of ``a . g + w tr`` with respect to the
chart coordinates and the parameters.

The trace uses the divergence identity for exp-map coordinates with an
orthonormal frame,

    tr(D_y g) = div_M f(phi(y)) - g . grad L(y),   L(y) = (n-1) log S(|y|),

where for ``f = P_z h`` with metric ``G`` and curvature sign ``k``

    div_M f = tr(Dh) - k z^T G Dh z - k n z^T G h.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct

import numpy as np

from . import _kernels
from .errors import ChartOverflowError, ChecksumError, DomainError
from .geometry import Hyperboloid, Manifold, get_manifold, manifold_name

CHART_EPS = 0.1


class FieldMode(str, enum.Enum):
    AMBIENT_PROJECTED = "ambient_projected"
    TANGENT_DIRECT = "tangent_direct"


class FieldParams:
    """Flat parameter vector plus the layer widths it is laid out for.

    Layout: for each layer, the weight matrix (fan_out x fan_in, row-major)
    followed by the bias. Hidden layers use tanh, the last layer is linear.
    """

    def __init__(self, theta, sizes, manifold: Manifold, mode=FieldMode.AMBIENT_PROJECTED):
        self.manifold = manifold
        self.mode = FieldMode(mode)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params(self.sizes),):
            raise ValueError(f"theta has {theta.size} entries, layout needs {self.num_params(self.sizes)}")
        if self.sizes[0] != self.in_width or self.sizes[-1] != self.out_width:
            raise ValueError(f"layer widths {list(self.sizes)} do not fit {manifold} in mode {self.mode.value}")
        if self.mode is FieldMode.TANGENT_DIRECT and not isinstance(manifold, Hyperboloid):
            raise ValueError("tangent-direct dynamics need a single global chart (hyperboloid only)")
        self.theta = theta

    @staticmethod
    def num_params(sizes):
        return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))

    @property
    def state_width(self):
        m = self.manifold
        return m.dim if self.mode is FieldMode.TANGENT_DIRECT else m.ambient_dim

    @property
    def in_width(self):
        return self.state_width + 1

    @property
    def out_width(self):
        return self.state_width

    @classmethod
    def init(cls, manifold, mode=FieldMode.AMBIENT_PROJECTED, hidden=32, num_layers=4, rng=None, scale=1.0):
        """Glorot-uniform weights, zero biases."""
        mode = FieldMode(mode)
        width = manifold.dim if mode is FieldMode.TANGENT_DIRECT else manifold.ambient_dim
        sizes = [width + 1] + [hidden] * (num_layers - 1) + [width]
        rng = np.random.default_rng(rng)
        parts = []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            lim = math.sqrt(6.0 / (fi + fo))
            parts.append(scale * rng.uniform(-lim, lim, size=fi * fo))
            parts.append(np.zeros(fo))
        return cls(np.concatenate(parts), sizes, manifold, mode)

    @classmethod
    def zeros(cls, manifold, mode=FieldMode.AMBIENT_PROJECTED, hidden=32, num_layers=4):
        p = cls.init(manifold, mode, hidden, num_layers, rng=0)
        return p.with_theta(np.zeros_like(p.theta))

    def with_theta(self, theta):
        return FieldParams(theta, self.sizes, self.manifold, self.mode)

    def layers(self):
        return _kernels.mlp_py.unpack(self.theta, self.sizes)

    def __repr__(self):
        return f"FieldParams({self.manifold}, {self.mode.value}, sizes={list(self.sizes)})"


# ---------------------------------------------------------------------------
# raw network

def mlp_forward(params: FieldParams, x, t, jac=True):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _kernels.backend.forward(params.theta, params.sizes, x, float(t), jac)


def mlp_backward(params: FieldParams, x, t, g_out=None, g_jac=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _kernels.backend.backward(params.theta, params.sizes, x, float(t), g_out, g_jac)


def _batch(z):
    z = np.asarray(z, dtype=np.float64)
    return (z[None], True) if z.ndim == 1 else (z, False)


# ---------------------------------------------------------------------------
# ambient field

def field_eval(params: FieldParams, z, t):
    """Tangent vector f(z, t); chart-coordinate velocity in tangent-direct mode."""
    zb, single = _batch(z)
    h, _ = mlp_forward(params, zb, t, jac=False)
    if params.mode is FieldMode.AMBIENT_PROJECTED:
        h = params.manifold.proj_tangent(zb, h)
    return h[0] if single else h


def field_jacobian_z(params: FieldParams, z, t):
    """Exact derivative of ``field_eval`` in the point (ambient extension in ambient mode)."""
    zb, single = _batch(z)
    h, Dh = mlp_forward(params, zb, t)
    if params.mode is FieldMode.TANGENT_DIRECT:
        return Dh[0] if single else Dh
    M = params.manifold
    k = M.kappa
    Gz = M.lower(zb)
    # f = h - k <z,h> z
    Df = (
        Dh
        - k * zb[:, :, None] * np.einsum("nd,nde->ne", Gz, Dh)[:, None, :]
        - k * zb[:, :, None] * M.lower(h)[:, None, :]
        - k * M.inner(zb, h)[:, None, None] * np.eye(M.ambient_dim)
    )
    return Df[0] if single else Df


def field_vjp_params(params: FieldParams, z, t, cotangent):
    """Batch-summed ``cotangent . df/dtheta`` as a flat vector."""
    zb, _ = _batch(z)
    c = np.asarray(cotangent, dtype=np.float64).reshape(zb.shape[0], -1)
    if params.mode is FieldMode.AMBIENT_PROJECTED:
        M = params.manifold
        # c P_z = c - k (c.z) (G z)
        c = c - M.kappa * np.sum(c * zb, axis=-1)[:, None] * M.lower(zb)
    g, _ = mlp_backward(params, zb, t, g_out=c)
    return g


def field_divergence(params: FieldParams, z, t):
    """Riemannian divergence of the projected field at ambient points ``z``."""
    M = params.manifold
    zb, single = _batch(z)
    h, Dh = mlp_forward(params, zb, t)
    d = _divergence(M, zb, h, Dh)
    return d[0] if single else d


def _divergence(M, z, h, Dh):
    Gz = M.lower(z)
    return (
        np.trace(Dh, axis1=-2, axis2=-1)
        - M.kappa * np.einsum("nd,nde,ne->n", Gz, Dh, z)
        - M.kappa * M.dim * np.sum(Gz * h, axis=-1)
    )


def _vjp_core(params, z, t, abar, w, h, Dh):
    """Gradient of ``abar . P_z h(z) + w div_M f(z)`` in z (ambient) and theta.

    ``abar`` is an ambient row covector, ``w`` per-row weights.
    """
    M = params.manifold
    k, n = M.kappa, M.dim
    Gz = M.lower(z)
    Gh = M.lower(h)
    az = np.sum(abar * z, axis=-1)
    abar_p = abar - k * az[:, None] * Gz
    g_out = abar_p - k * n * w[:, None] * Gz
    eye = np.eye(M.ambient_dim)
    g_jac = w[:, None, None] * (eye - k * Gz[:, :, None] * z[:, None, :])
    gth, gx = mlp_backward(params, z, t, g_out, g_jac)
    zGh = np.sum(z * Gh, axis=-1)
    GDhz = M.lower(np.einsum("nde,ne->nd", Dh, z))
    DhTGz = np.einsum("nde,nd->ne", Dh, Gz)
    gz = (
        gx
        - k * az[:, None] * Gh
        - k * zGh[:, None] * abar
        - k * w[:, None] * (GDhz + DhTGz)
        - k * n * w[:, None] * Gh
    )
    return gz, gth


def ambient_vjp(params: FieldParams, z, t, a, w):
    """``(a . D_z f + w grad div, a . df/dtheta + w d div/dtheta)`` for ambient points."""
    if params.mode is not FieldMode.AMBIENT_PROJECTED:
        raise ValueError("ambient adjoint is defined for ambient-projected dynamics only")
    z = np.asarray(z, dtype=np.float64)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), z.shape[:1])
    h, Dh = mlp_forward(params, z, t)
    return _vjp_core(params, z, t, np.asarray(a, dtype=np.float64), w, h, Dh)


# ---------------------------------------------------------------------------
# chart pullback

def chart_radius(manifold: Manifold, eps=CHART_EPS):
    return (1.0 - eps) * manifold.injectivity_radius


class ChartEval:
    """Chart velocity, its trace and everything reused by the VJP."""

    __slots__ = ("z", "B", "GB", "Mm", "h", "Dh", "ghat", "trace", "gradL", "hessL", "overflow")


def chart_eval(params: FieldParams, x, frame, y, t, radius=None):
    """Chart dynamics for a batch; rows with ``|y| >= radius`` are flagged, not raised."""
    M = params.manifold
    y = np.asarray(y, dtype=np.float64)
    if radius is None:
        radius = chart_radius(M)
    ev = ChartEval()
    ev.overflow = np.linalg.norm(y, axis=-1) >= radius
    if params.mode is FieldMode.TANGENT_DIRECT:
        g, Dg = mlp_forward(params, y, t)
        ev.ghat = g
        ev.Dh = Dg
        ev.trace = np.trace(Dg, axis1=-2, axis2=-1)
        return ev
    # evaluate overflowing rows at a clipped radius so the numbers stay finite
    ys = y
    if np.any(ev.overflow) and np.isfinite(radius):
        nrm = np.linalg.norm(y, axis=-1, keepdims=True)
        ys = np.where(ev.overflow[:, None], y * (radius * 0.999 / np.maximum(nrm, 1e-300)), y)
    ev.z = M.chart(x, frame, ys)
    ev.B = M.chart_jacobian(x, frame, ys)
    ev.GB = ev.B * M.metric_diag[:, None]
    ev.Mm = np.einsum("ndi,ndj->nij", ev.B, ev.GB)
    ev.h, ev.Dh = mlp_forward(params, ev.z, t)
    f = M.proj_tangent(ev.z, ev.h)
    ev.ghat = np.linalg.solve(ev.Mm, np.einsum("ndi,nd->ni", ev.GB, f)[..., None])[..., 0]
    ev.gradL, ev.hessL = M.chart_logdet_grad(ys)
    ev.trace = _divergence(M, ev.z, ev.h, ev.Dh) - np.sum(ev.ghat * ev.gradL, axis=-1)
    return ev


def chart_vjp(params: FieldParams, x, frame, y, t, a, w, ev=None):
    """Gradients of ``a . g(y) + w tr(D_y g)`` in ``y`` (per row) and theta (summed)."""
    y = np.asarray(y, dtype=np.float64)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape[:1])
    if ev is None:
        ev = chart_eval(params, x, frame, y, t, radius=np.inf)
    if params.mode is FieldMode.TANGENT_DIRECT:
        eye = np.eye(y.shape[-1])
        gth, gy = mlp_backward(params, y, t, a, w[:, None, None] * eye)
        return gy, gth
    M = params.manifold
    atil = a - w[:, None] * ev.gradL
    v = np.linalg.solve(ev.Mm, atil[..., None])[..., 0]
    abar = np.einsum("ndi,ni->nd", ev.GB, v)
    gz, gth = _vjp_core(params, ev.z, t, abar, w, ev.h, ev.Dh)
    gy = (
        np.einsum("nd,ndi->ni", gz, ev.B)
        - M.chart_second(x, frame, y, ev.ghat, abar)
        - w[:, None] * np.einsum("nij,nj->ni", ev.hessL, ev.ghat)
    )
    return gy, gth


def chart_pullback_dynamics(params: FieldParams, x, frame, y, t, radius=None):
    """Chart-coordinate velocity ``D phi^-1 f(phi(y), t)`` in the frame at ``x``.

    Raises ChartOverflowError (with a per-row mask) when ``|y|`` reaches the
    chart radius ``(1 - eps) * injectivity_radius``.
    """
    xb, single = _batch(x)
    fb = frame[None] if single else frame
    yb = y[None] if single else y
    ev = chart_eval(params, xb, fb, yb, t, radius)
    if np.any(ev.overflow):
        raise ChartOverflowError("chart coordinates left the injectivity ball", mask=ev.overflow)
    return ev.ghat[0] if single else ev.ghat


def clip_speed(v, limit):
    """Scale rows of ``v`` down to norm ``limit`` (optional Lipschitz safeguard)."""
    if limit is None or not np.isfinite(limit):
        return v
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * np.minimum(1.0, limit / np.maximum(nrm, 1e-300))


# ---------------------------------------------------------------------------
# checkpoints: <u64 LE header length><JSON header><float64 LE payload>

def write_checkpoint(path, header: dict, payload):
    payload = np.ascontiguousarray(payload, dtype="<f8")
    raw = payload.tobytes()
    header = dict(header)
    header["payload_len"] = int(payload.size)
    header["sha256"] = hashlib.sha256(raw).hexdigest()
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(raw)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise ChecksumError("checkpoint is truncated")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"checkpoint header is corrupted: {exc}") from None
    raw = data[8 + hlen:]
    if hashlib.sha256(raw).hexdigest() != header.get("sha256") or len(raw) != 8 * header.get("payload_len", -1):
        raise ChecksumError("checkpoint payload does not match its checksum")
    return header, np.frombuffer(raw, dtype="<f8").astype(np.float64)


def params_header(params: FieldParams):
    return {
        "kind": "field",
        "manifold": manifold_name(params.manifold),
        "mode": params.mode.value,
        "sizes": [int(s) for s in params.sizes],
    }


def params_from_header(header, theta):
    try:
        M = get_manifold(header["manifold"])
        return FieldParams(theta, header["sizes"], M, header["mode"])
    except (KeyError, ValueError) as exc:
        raise DomainError(f"checkpoint header does not describe a field: {exc}") from None


def save_params(path, params: FieldParams):
    write_checkpoint(path, params_header(params), params.theta)


def load_params(path):
    header, theta = read_checkpoint(path)
    return params_from_header(header, theta)
