"""Pure-numpy MLP kernels (fallback for the compiled ``_mlp`` extension).

The network is a stack of affine layers with tanh between them and a linear
output layer; its input is ``[x, t]``. Parameters live in one flat float64
vector laid out layer by layer as ``W_k`` (row-major) followed by ``b_k``.

``forward`` returns the output and its Jacobian with respect to ``x``.
``backward`` contracts the output with ``g_out`` and the Jacobian with
``g_jac`` and returns the batch-summed parameter gradient plus the
per-row input gradient, i.e. a reverse pass over the forward-mode tangents.
"""

import numpy as np


def unpack(theta, sizes):
    layers = []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = theta[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _inputs(x, t):
    return np.concatenate([x, np.full((x.shape[0], 1), float(t))], axis=1)


def forward(theta, sizes, x, t, jac=True):
    layers = unpack(theta, sizes)
    m = x.shape[1]
    h = _inputs(x, t)
    dh = None
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        a = h @ w.T + b
        if jac:
            da = w[:, :m] if k == 0 else np.matmul(w, dh)
        if k < last:
            h = np.tanh(a)
            if jac:
                dh = (1.0 - h * h)[:, :, None] * da
        else:
            out = a
            J = np.broadcast_to(da, (x.shape[0],) + da.shape[-2:]).copy() if jac else None
    return out, J


def backward(theta, sizes, x, t, g_out=None, g_jac=None):
    layers = unpack(theta, sizes)
    n, m = x.shape
    last = len(layers) - 1
    ins, slopes, das = [], [], []
    h = _inputs(x, t)
    dh = None
    for k, (w, b) in enumerate(layers):
        ins.append(h)
        a = h @ w.T + b
        if g_jac is not None:
            da = w[:, :m] if k == 0 else np.matmul(w, dh)
            das.append(da)
        if k < last:
            h = np.tanh(a)
            s = 1.0 - h * h
            slopes.append(s)
            if g_jac is not None:
                dh = s[:, :, None] * da
    grads = []
    g_a = np.zeros((n, sizes[-1])) if g_out is None else g_out
    g_da = g_jac
    g_x = None
    for k in range(last, -1, -1):
        w, _ = layers[k]
        hin = ins[k]
        gw = g_a.T @ hin
        gb = g_a.sum(axis=0)
        if g_da is not None:
            if k == 0:
                gw[:, :m] += g_da.sum(axis=0)
            else:
                dh_in = slopes[k - 1][:, :, None] * das[k - 1]
                gw += np.einsum("nim,njm->ij", g_da, dh_in)
        grads.append((gw, gb))
        if k == 0:
            g_x = g_a @ w[:, :m]
            break
        g_h = g_a @ w
        s = slopes[k - 1]
        if g_da is not None:
            g_dh = np.matmul(w.T, g_da)
            g_s = np.sum(g_dh * das[k - 1], axis=-1)
            g_h = g_h - 2.0 * ins[k] * g_s
            g_da = s[:, :, None] * g_dh
        g_a = s * g_h
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
    return flat, g_x
