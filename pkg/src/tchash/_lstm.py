"""Batched single-layer LSTM with hand-written backpropagation through time.

Gate order along the ``4h`` axis is input, forget, output, candidate.
Weights are one matrix ``W`` of shape ``(n_in + h, 4h)``: the first ``n_in``
rows act on the input, the rest on the previous hidden state.
"""

import numpy as np


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_forward(X, W, b):
    """Run the recurrence from zero state over ``X`` of shape ``(T, B, n_in)``.

    Returns hidden states ``(T, B, h)`` and a cache for the backward pass.
    """
    n_in = X.shape[-1]
    h = W.shape[1] // 4
    XW = X @ W[:n_in] + b
    return _recur(XW, W[n_in:], h, X.shape[0], X.shape[1], steps_in_x=True, X=X, n_in=n_in)


def lstm_forward_const(x, W, b, steps):
    """Same recurrence with the input ``x`` of shape ``(B, n_in)`` held fixed for ``steps``."""
    n_in = x.shape[-1]
    h = W.shape[1] // 4
    XW = x @ W[:n_in] + b
    return _recur(XW, W[n_in:], h, steps, x.shape[0], steps_in_x=False, X=x, n_in=n_in)


def _recur(XW, Wh, h, T, B, steps_in_x, X, n_in):
    H = np.empty((T, B, h))
    C = np.empty((T, B, h))
    G = np.empty((T, B, 4 * h))  # activated gates
    TC = np.empty((T, B, h))
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    for t in range(T):
        a = (XW[t] if steps_in_x else XW) + h_prev @ Wh
        g = G[t]
        g[:, : 3 * h] = sigmoid(a[:, : 3 * h])
        g[:, 3 * h:] = np.tanh(a[:, 3 * h:])
        c_prev = g[:, h:2 * h] * c_prev + g[:, :h] * g[:, 3 * h:]
        C[t] = c_prev
        TC[t] = np.tanh(c_prev)
        h_prev = g[:, 2 * h:3 * h] * TC[t]
        H[t] = h_prev
    cache = dict(X=X, Wh=Wh, H=H, C=C, G=G, TC=TC, const=not steps_in_x, n_in=n_in)
    return H, cache


def lstm_backward(dH, cache, W):
    """Gradients for ``W``, ``b`` and the input given ``dL/dH`` of shape ``(T, B, h)``.

    For constant-input runs the input gradient is summed over time.
    """
    H, C, G, TC, Wh = cache["H"], cache["C"], cache["G"], cache["TC"], cache["Wh"]
    X, n_in = cache["X"], cache["n_in"]
    T, B, h = H.shape
    dA = np.empty((T, B, 4 * h))
    dWh = np.zeros_like(Wh)
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    zero = np.zeros((B, h))
    WhT = Wh.T
    for t in range(T - 1, -1, -1):
        g = G[t]
        i, f, o, cand = g[:, :h], g[:, h:2 * h], g[:, 2 * h:3 * h], g[:, 3 * h:]
        dh = dH[t] + dh_next
        tc = TC[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = C[t - 1] if t > 0 else zero
        da = dA[t]
        da[:, :h] = dc * cand * i * (1.0 - i)
        da[:, h:2 * h] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * h:3 * h] = dh * tc * o * (1.0 - o)
        da[:, 3 * h:] = dc * i * (1.0 - cand * cand)
        if t > 0:
            dWh += H[t - 1].T @ da
        dh_next = da @ WhT
        dc_next = dc * f
    dW = np.empty_like(W)
    dW[n_in:] = dWh
    if cache["const"]:
        dsum = dA.sum(axis=0)
        dW[:n_in] = X.T @ dsum
        db = dsum.sum(axis=0)
        dX = dsum @ W[:n_in].T
    else:
        dW[:n_in] = np.einsum("tbi,tbj->ij", X, dA, optimize=True)
        db = dA.sum(axis=(0, 1))
        dX = dA @ W[:n_in].T
    return dW, db, dX


def lstm_last_hidden_backward(dh_last, cache, W):
    T, B, h = cache["H"].shape
    dH = np.zeros((T, B, h))
    dH[-1] = dh_last
    return lstm_backward(dH, cache, W)
