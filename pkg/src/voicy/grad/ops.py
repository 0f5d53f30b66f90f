"""Differentiable primitives recorded on a :class:`~voicy.grad.engine.Tape`.

Sequences are 2-D ``(time, features)`` arrays; there is no batch axis.
Recurrent weights are stored gate-stacked: GRU gates in the order
(reset, update, candidate), LSTM gates in the order (input, forget, cell,
output).
"""

from __future__ import annotations

import numpy as np

from .engine import GradError, Var


def _check(cond, msg):
    if not cond:
        raise GradError(msg)


def sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------


def linear(x: Var, W: Var, b: Var | None = None, name: str = "linear") -> Var:
    xv, Wv = x.value, W.value
    _check(
        xv.shape[-1] == Wv.shape[0],
        f"{name}: expected input features {Wv.shape[0]}, got shape {xv.shape}",
    )
    out = xv @ Wv
    if b is not None:
        out = out + b.value

    def backward(g):
        gx = g @ Wv.T
        gW = np.outer(xv, g) if xv.ndim == 1 else xv.T @ g
        if b is None:
            return gx, gW
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return x.tape.op(out, parents, backward)


def conv1d(x: Var, W: Var, b: Var, name: str = "conv1d") -> Var:
    """'Same' convolution over time: ``W`` is ``(kernel, in, out)``, odd kernel."""
    xv, Wv = x.value, W.value
    k, cin, cout = Wv.shape
    _check(k % 2 == 1, f"{name}: kernel size must be odd, got {k}")
    _check(
        xv.ndim == 2 and xv.shape[1] == cin,
        f"{name}: expected (time, {cin}) input, got shape {xv.shape}",
    )
    T = xv.shape[0]
    pad = k // 2
    xp = np.pad(xv, ((pad, pad), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (T, cin, k)
    cols = cols.transpose(0, 2, 1).reshape(T, k * cin)
    Wr = Wv.reshape(k * cin, cout)
    out = cols @ Wr + b.value

    def backward(g):
        gW = (cols.T @ g).reshape(k, cin, cout)
        gcols = (g @ Wr.T).reshape(T, k, cin)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j : j + T] += gcols[:, j]
        return gxp[pad : pad + T], gW, g.sum(axis=0)

    return x.tape.op(out, (x, W, b), backward)


# ---------------------------------------------------------------------------
# recurrent layers
# ---------------------------------------------------------------------------


def gru(x: Var, Wx: Var, Wh: Var, bx: Var, bh: Var, reverse: bool = False, name: str = "gru") -> Var:
    """Run a GRU over the sequence from a zero state; returns all hidden states.

    r = s(x Wr + h Ur + br), z = s(x Wz + h Uz + bz),
    n = tanh(x Wn + bxn + r * (h Un + bhn)), h' = (1 - z) * n + z * h
    """
    xv = x.value
    H = Wh.value.shape[0]
    _check(Wh.value.shape == (H, 3 * H), f"{name}: recurrent weight must be (H, 3H)")
    _check(
        xv.ndim == 2 and xv.shape[1] == Wx.value.shape[0],
        f"{name}: expected (time, {Wx.value.shape[0]}) input, got shape {xv.shape}",
    )
    if reverse:
        xv = xv[::-1]
    T = xv.shape[0]
    Whv = Wh.value
    xs = xv @ Wx.value + bx.value
    hs = np.zeros((T + 1, H), dtype=xv.dtype)
    r = np.empty((T, H), dtype=xv.dtype)
    z = np.empty_like(r)
    n = np.empty_like(r)
    hn = np.empty_like(r)
    for t in range(T):
        hw = hs[t] @ Whv + bh.value
        rz = sigmoid_np(xs[t, : 2 * H] + hw[: 2 * H])
        r[t], z[t] = rz[:H], rz[H:]
        hn[t] = hw[2 * H :]
        n[t] = np.tanh(xs[t, 2 * H :] + r[t] * hn[t])
        hs[t + 1] = (1.0 - z[t]) * n[t] + z[t] * hs[t]
    out = hs[1:]
    if reverse:
        out = out[::-1]

    def backward(g):
        if reverse:
            g = g[::-1]
        dxs = np.empty((T, 3 * H), dtype=g.dtype)
        dhw = np.empty((T, 3 * H), dtype=g.dtype)
        dh_next = np.zeros(H, dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            dh = g[t] + dh_next
            dn = dh * (1.0 - z[t]) * (1.0 - n[t] ** 2)
            dz = dh * (hs[t] - n[t]) * z[t] * (1.0 - z[t])
            dr = dn * hn[t] * r[t] * (1.0 - r[t])
            dxs[t, :H] = dr
            dxs[t, H : 2 * H] = dz
            dxs[t, 2 * H :] = dn
            dhw[t, :H] = dr
            dhw[t, H : 2 * H] = dz
            dhw[t, 2 * H :] = dn * r[t]
            dh_next = dh * z[t] + dhw[t] @ Whv.T
        gWx = xv.T @ dxs
        gWh = hs[:-1].T @ dhw
        gx = dxs @ Wx.value.T
        if reverse:
            gx = gx[::-1]
        return gx, gWx, gWh, dxs.sum(axis=0), dhw.sum(axis=0)

    return x.tape.op(out, (x, Wx, Wh, bx, bh), backward)


def lstm(x: Var, Wx: Var, Wh: Var, b: Var, reverse: bool = False, name: str = "lstm") -> Var:
    """Run an LSTM over the sequence from zero state; returns all hidden states."""
    xv = x.value
    H = Wh.value.shape[0]
    _check(Wh.value.shape == (H, 4 * H), f"{name}: recurrent weight must be (H, 4H)")
    _check(
        xv.ndim == 2 and xv.shape[1] == Wx.value.shape[0],
        f"{name}: expected (time, {Wx.value.shape[0]}) input, got shape {xv.shape}",
    )
    if reverse:
        xv = xv[::-1]
    T = xv.shape[0]
    Whv = Wh.value
    xs = xv @ Wx.value + b.value
    hs = np.zeros((T + 1, H), dtype=xv.dtype)
    cs = np.zeros((T + 1, H), dtype=xv.dtype)
    gates = np.empty((T, 4 * H), dtype=xv.dtype)
    tanh_c = np.empty((T, H), dtype=xv.dtype)
    for t in range(T):
        pre = xs[t] + hs[t] @ Whv
        act = np.empty_like(pre)
        act[: 2 * H] = sigmoid_np(pre[: 2 * H])
        act[2 * H : 3 * H] = np.tanh(pre[2 * H : 3 * H])
        act[3 * H :] = sigmoid_np(pre[3 * H :])
        gates[t] = act
        i, f, c_hat, o = act[:H], act[H : 2 * H], act[2 * H : 3 * H], act[3 * H :]
        cs[t + 1] = f * cs[t] + i * c_hat
        tanh_c[t] = np.tanh(cs[t + 1])
        hs[t + 1] = o * tanh_c[t]
    out = hs[1:]
    if reverse:
        out = out[::-1]

    def backward(g):
        if reverse:
            g = g[::-1]
        dpre = np.empty((T, 4 * H), dtype=g.dtype)
        dh_next = np.zeros(H, dtype=g.dtype)
        dc_next = np.zeros(H, dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            act = gates[t]
            i, f, c_hat, o = act[:H], act[H : 2 * H], act[2 * H : 3 * H], act[3 * H :]
            dh = g[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c[t] ** 2)
            dpre[t, :H] = dc * c_hat * i * (1.0 - i)
            dpre[t, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
            dpre[t, 2 * H : 3 * H] = dc * i * (1.0 - c_hat**2)
            dpre[t, 3 * H :] = dh * tanh_c[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dpre[t] @ Whv.T
        gWx = xv.T @ dpre
        gWh = hs[:-1].T @ dpre
        gx = dpre @ Wx.value.T
        if reverse:
            gx = gx[::-1]
        return gx, gWx, gWh, dpre.sum(axis=0)

    return x.tape.op(out, (x, Wx, Wh, b), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return x.tape.op(out, (x,), lambda g: (g * (1.0 - out**2),))


def sigmoid(x: Var) -> Var:
    out = sigmoid_np(np.asarray(x.value))
    return x.tape.op(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.op(x.value * mask, (x,), lambda g: (g * mask,))


ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


# ---------------------------------------------------------------------------
# temporal reshaping
# ---------------------------------------------------------------------------


def temporal_downsample(x: Var, factor: int) -> Var:
    """Average consecutive blocks of ``factor`` frames -> ``ceil(T / factor)`` frames.

    The final block may be partial and is averaged over the frames it has.
    """
    xv = x.value
    _check(xv.ndim == 2, f"temporal_downsample: expected (time, features), got {xv.shape}")
    T = xv.shape[0]
    n_out = -(-T // factor)
    starts = np.arange(n_out) * factor
    sums = np.add.reduceat(xv, starts, axis=0)
    counts = np.minimum(factor, T - starts).astype(xv.dtype)[:, None]
    out = sums / counts

    def backward(g):
        return (np.repeat(g / counts, factor, axis=0)[:T],)

    return x.tape.op(out, (x,), backward)


def temporal_upsample(x: Var, factor: int, length: int) -> Var:
    """Repeat every frame ``factor`` times and truncate to ``length`` frames.

    A 1-D input is treated as a single frame, which broadcasts a vector over
    time when ``factor == length``.
    """
    xv = x.value
    vector = xv.ndim == 1
    frames = xv[None, :] if vector else xv
    _check(
        frames.shape[0] * factor >= length,
        f"temporal_upsample: {frames.shape[0]} frames x {factor} cannot cover {length}",
    )
    out = np.repeat(frames, factor, axis=0)[:length]
    n_in = frames.shape[0]

    def backward(g):
        padded = np.zeros((n_in * factor, g.shape[1]), dtype=g.dtype)
        padded[:length] = g
        gx = padded.reshape(n_in, factor, -1).sum(axis=1)
        return (gx[0] if vector else gx,)

    return x.tape.op(out, (x,), backward)


def concat(xs: list[Var], axis: int = -1) -> Var:
    values = [v.value for v in xs]
    ndims = {v.ndim for v in values}
    _check(len(ndims) == 1, "concat: inputs must share dimensionality")
    lead = {v.shape[:-1] for v in values} if axis in (-1, values[0].ndim - 1) else None
    _check(lead is None or len(lead) == 1, f"concat: mismatched shapes {[v.shape for v in values]}")
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return xs[0].tape.op(out, tuple(xs), backward)


def mean_pool_time(x: Var) -> Var:
    xv = x.value
    T = xv.shape[0]
    return x.tape.op(xv.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / T, xv.shape).copy(),))


def select_step(x: Var, index: int) -> Var:
    xv = x.value

    def backward(g):
        gx = np.zeros_like(xv)
        gx[index] = g
        return (gx,)

    return x.tape.op(xv[index].copy(), (x,), backward)


# ---------------------------------------------------------------------------
# arithmetic and losses
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return a.tape.op(a.value + b.value, (a, b), lambda g: (g, g))


def scale(x: Var, factor: float) -> Var:
    return x.tape.op(x.value * factor, (x,), lambda g: (g * factor,))


def affine(x: Var, mul: float, shift: float) -> Var:
    return x.tape.op(x.value * mul + shift, (x,), lambda g: (g * mul,))


def stop_gradient(x: Var) -> Var:
    return x.tape.constant(x.value.copy())


def weighted_sum(x: Var, weights: np.ndarray) -> Var:
    _check(weights.shape == x.shape, "weighted_sum: weight shape mismatch")
    return x.tape.op(np.sum(x.value * weights), (x,), lambda g: (g * weights,))


def mse(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size

    def backward(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return a.tape.op(np.mean(diff**2), (a, b), backward)


def mae(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"mae: shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size
    sign = np.sign(diff)

    def backward(g):
        ga = g * sign / n
        return ga, -ga

    return a.tape.op(np.mean(np.abs(diff)), (a, b), backward)


def l2_normalize(x: Var) -> Var:
    xv = x.value
    norm = np.linalg.norm(xv)
    _check(norm > 0, "l2_normalize: zero vector")
    out = xv / norm

    def backward(g):
        return ((g - out * np.dot(out, g)) / norm,)

    return x.tape.op(out, (x,), backward)
