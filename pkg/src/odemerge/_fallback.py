"""Pure numpy implementation of the hot kernels (used when the extension is absent)."""
import numpy as np


def _unpack(params, sizes):
    layers, off = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = params[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        layers.append((w, b))
    if off != params.shape[0]:
        raise ValueError("parameter length does not match layer sizes")
    return layers


def mlp_forward(params, X, sizes, activation):
    """Return the list of layer activations; the last entry holds the logits."""
    layers = _unpack(params, sizes)
    if X.shape[1] != sizes[0]:
        raise ValueError("feature width does not match input size")
    acts = [X]
    for idx, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if idx < len(layers) - 1:
            z = np.tanh(z) if activation == 0 else np.maximum(z, 0.0)
        acts.append(z)
    return acts


def mlp_loss_grad(params, X, y, sizes, activation, want_grad=True):
    # diverged parameters overflow to inf/nan; callers check finiteness
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_grad(params, X, y, sizes, activation, want_grad)


def _loss_grad(params, X, y, sizes, activation, want_grad):
    n = X.shape[0]
    sizes = [int(s) for s in sizes]
    acts = mlp_forward(params, X, sizes, activation)
    logits = acts[-1]
    if n and (y.min() < 0 or y.max() >= sizes[-1]):
        raise ValueError("label out of range")
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    sumexp = np.exp(shifted).sum(axis=1)
    rows = np.arange(n)
    loss = float(np.sum(np.log(sumexp) - shifted[rows, y]) / n) if n else 0.0
    if not want_grad:
        return loss, None
    grad = np.zeros(params.shape[0])
    if n == 0:
        return loss, grad
    delta = np.exp(shifted) / sumexp[:, None]
    delta[rows, y] -= 1.0
    delta /= n
    layers = _unpack(params, sizes)
    offs, off = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        offs.append(off)
        off += n_in * n_out + n_out
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        n_in, n_out = w.shape
        a_prev = acts[idx]
        o = offs[idx]
        grad[o:o + n_in * n_out] = (a_prev.T @ delta).ravel()
        grad[o + n_in * n_out:o + n_in * n_out + n_out] = delta.sum(axis=0)
        if idx > 0:
            back = delta @ w.T
            if activation == 0:
                delta = back * (1.0 - a_prev * a_prev)
            else:
                delta = back * (a_prev > 0.0)
    return loss, grad
