"""Forward/backward primitives for the segment classifier.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Tensors are float64 and laid out
as ``(batch, channels, time)`` for the convolutional part and
``(steps, batch, features)`` for the recurrent part.
"""
from __future__ import annotations

import numpy as np

NORM_EPS = 1e-5


def conv1d_forward(x, w, b):
    """Stride-1 'same' convolution. x: (B, Cin, L), w: (Cout, Cin, k), b: (Cout,)."""
    batch, cin, length = x.shape
    cout, _, k = w.shape
    left = (k - 1) // 2
    xt = np.pad(x, ((0, 0), (0, 0), (left, k - 1 - left))).transpose(1, 0, 2)
    cols = np.empty((cin, k, batch, length))
    for j in range(k):
        cols[:, j] = xt[:, :, j:j + length]
    cols = cols.reshape(cin * k, batch * length)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, batch, length).transpose(1, 0, 2)
    return out + b[None, :, None], (cols, x.shape, w)


def conv1d_backward(dout, cache):
    cols, (batch, cin, length), w = cache
    cout, _, k = w.shape
    left = (k - 1) // 2
    d = dout.transpose(1, 0, 2).reshape(cout, batch * length)
    dw = (d @ cols.T).reshape(w.shape)
    dcols = (w.reshape(cout, -1).T @ d).reshape(cin, k, batch, length)
    dxp = np.zeros((cin, batch, length + k - 1))
    for j in range(k):
        dxp[:, :, j:j + length] += dcols[:, j]
    return dxp[:, :, left:left + length].transpose(1, 0, 2), dw, dout.sum(axis=(0, 2))


def instance_norm_forward(x, gamma, beta):
    """Per-sample, per-channel normalization over time with affine output."""
    mu = x.mean(axis=2, keepdims=True)
    var = x.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv, gamma)


def instance_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[2]
    dgamma = (dout * xhat).sum(axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=2, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=2, keepdims=True)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def avg_pool_forward(x, p):
    """Non-overlapping mean pooling along time; a remainder shorter than p is dropped."""
    if p == 1:
        return x, (x.shape, 1)
    n, c, length = x.shape
    lp = length // p
    out = x[:, :, : lp * p].reshape(n, c, lp, p).mean(axis=3)
    return out, (x.shape, p)


def avg_pool_backward(dout, cache):
    shape, p = cache
    if p == 1:
        return dout
    dx = np.zeros(shape)
    lp = dout.shape[2]
    dx[:, :, : lp * p] = np.repeat(dout / p, p, axis=2)
    return dx


def fragment_forward(x, n_split):
    """Split time into n_split equal fragments and mean each one -> (n_split, B, C)."""
    n, c, length = x.shape
    flen = length // n_split
    seq = x.reshape(n, c, n_split, flen).mean(axis=3)
    return np.ascontiguousarray(seq.transpose(2, 0, 1)), (x.shape, n_split)


def fragment_backward(dseq, cache):
    shape, n_split = cache
    flen = shape[2] // n_split
    d = dseq.transpose(1, 2, 0) / flen  # (B, C, n_split)
    return np.repeat(d, flen, axis=2)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(seq, wx, wh, b):
    """Run an LSTM over seq (S, B, D) from zero state; return the final hidden state.

    Gate order inside the 4H axis is input, forget, cell, output.
    """
    steps, batch, _ = seq.shape
    hidden = wh.shape[0]
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    caches = []
    for t in range(steps):
        z = seq[t] @ wx + h @ wh + b
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = _sigmoid(z[:, 3 * hidden:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        caches.append((h_prev, c_prev, i, f, g, o, tc))
    return h, (seq, wx, wh, caches)


def lstm_backward(dh_final, cache):
    seq, wx, wh, caches = cache
    hidden = wh.shape[0]
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * hidden)
    dseq = np.zeros_like(seq)
    dh = dh_final
    dc = np.zeros_like(dh_final)
    for t in reversed(range(seq.shape[0])):
        h_prev, c_prev, i, f, g, o, tc = caches[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        dwx += seq[t].T @ dz
        dwh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dseq[t] = dz @ wx.T
        dh = dz @ wh.T
        dc = dc * f
    return dseq, dwx, dwh, db


def dense_forward(x, w, b):
    return x @ w.T + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels, weights=None):
    """Mean (optionally weighted) negative log-likelihood and its logit gradient."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    probs = np.exp(z - logsum[:, None])
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float((w * nll).sum() / n)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= (w / n)[:, None]
    return loss, dlogits, nll
