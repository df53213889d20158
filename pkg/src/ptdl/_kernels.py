"""Hot loops of the MLP: per-example clipped gradient sums and batch prediction.

Two interchangeable backends are provided. The numba backend fuses the
forward pass, backward pass and per-example clipping into one loop over
examples; the numpy backend vectorises the same computation over the batch
and obtains per-example gradient norms from layer activations and
back-propagated errors without materialising per-example gradients.

Set ``PTDL_DISABLE_NUMBA=1`` before import to force the numpy backend, or
switch at runtime with :func:`use_numba`.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_ENABLED = HAVE_NUMBA and os.environ.get("PTDL_DISABLE_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)

PROB_FLOOR = 1e-12
# below this batch size the fused per-example loop beats BLAS matmuls
FUSED_MAX_BATCH = 16
# numba prediction only wins on small batches; larger ones go to numpy's BLAS
PREDICT_NB_MAX_BATCH = 32


def numba_enabled() -> bool:
    return _ENABLED


@contextlib.contextmanager
def use_numba(flag: bool):
    """Temporarily select the numba (``True``) or numpy (``False``) backend."""
    global _ENABLED
    if flag and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    saved = _ENABLED
    _ENABLED = flag
    try:
        yield
    finally:
        _ENABLED = saved


# ---------------------------------------------------------------- numpy path


def _unpack(theta: np.ndarray, dims: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    off = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = theta[off : off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = theta[off : off + d_out]
        off += d_out
        layers.append((w, b))
    return layers


def _forward_np(theta, dims, X):
    layers = _unpack(theta, dims)
    acts = [X]
    a = X
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        if i < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
        else:
            a = z
    return acts, a, layers


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits_np(theta, dims, X):
    return _forward_np(theta, dims, X)[1]


def predict_np(theta, dims, X):
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits_np(theta, dims, X), axis=1)


def clipped_grad_sum_np(theta, dims, X, y, clip):
    acts, logits, layers = _forward_np(theta, dims, X)
    n = X.shape[0]
    probs = _softmax(logits)
    py = probs[np.arange(n), y]
    loss = float(-np.log(np.maximum(py, PROB_FLOOR)).sum())
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    deltas = [None] * len(layers)
    deltas[-1] = delta
    for i in range(len(layers) - 1, 0, -1):
        w = layers[i][0]
        delta = (delta @ w.T) * (acts[i] > 0.0)
        deltas[i - 1] = delta
    sq = np.zeros(n)
    for a, d in zip(acts, deltas):
        sq += ((a * a).sum(axis=1) + 1.0) * (d * d).sum(axis=1)
    scale = 1.0 / np.maximum(1.0, np.sqrt(sq) / clip)
    out = np.empty_like(theta)
    off = 0
    for a, d in zip(acts, deltas):
        sd = d * scale[:, None]
        gw = a.T @ sd
        out[off : off + gw.size] = gw.ravel()
        off += gw.size
        gb = sd.sum(axis=0)
        out[off : off + gb.size] = gb
        off += gb.size
    return out, loss


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    # Weight rows are taken as slice views rather than flat offsets: with
    # runtime offsets LLVM cannot prove indices non-negative and refuses to
    # vectorise the inner loops.

    @numba.njit(cache=True)
    def _layer_forward_nb(theta, w0, d_in, d_out, src, dst, relu):
        W = theta[w0 : w0 + d_in * d_out]
        out = dst[:d_out]
        out[:] = theta[w0 + d_in * d_out : w0 + d_in * d_out + d_out]
        for k in range(d_in):
            a = src[k]
            if a != 0.0:  # ReLU outputs and image backgrounds are mostly zero
                Wk = W[k * d_out : (k + 1) * d_out]
                for j in range(d_out):
                    out[j] += a * Wk[j]
        if relu:
            for j in range(d_out):
                if out[j] < 0.0:
                    out[j] = 0.0

    @numba.njit(cache=True)
    def _clipped_grad_sum_nb(theta, dims, X, y, clip):
        n_layers = dims.shape[0] - 1
        width = 0
        for i in range(dims.shape[0]):
            if dims[i] > width:
                width = dims[i]
        offsets = _param_offsets_nb(dims)
        out = np.zeros(theta.shape[0])
        acts = np.zeros((n_layers + 1, width))
        deltas = np.zeros((n_layers, width))
        loss = 0.0
        for i in range(X.shape[0]):
            acts[0, : dims[0]] = X[i]
            for l in range(n_layers):
                _layer_forward_nb(theta, offsets[l], dims[l], dims[l + 1], acts[l], acts[l + 1], l < n_layers - 1)
            c = dims[n_layers]
            z = acts[n_layers, :c]
            top = deltas[n_layers - 1, :c]
            zmax = z.max()
            tot = 0.0
            for j in range(c):
                top[j] = np.exp(z[j] - zmax)
                tot += top[j]
            for j in range(c):
                top[j] /= tot
            py = top[y[i]]
            if py < 1e-12:
                py = 1e-12
            loss -= np.log(py)
            top[y[i]] -= 1.0
            # backward; the per-example norm is sum_l (|a_l|^2 + 1) |delta_l|^2
            sq = 0.0
            for l in range(n_layers - 1, -1, -1):
                d_in = dims[l]
                d_out = dims[l + 1]
                a_l = acts[l, :d_in]
                dl = deltas[l, :d_out]
                sq += (1.0 + np.dot(a_l, a_l)) * np.dot(dl, dl)
                if l > 0:
                    prev = deltas[l - 1, :d_in]
                    W = theta[offsets[l] : offsets[l] + d_in * d_out]
                    for k in range(d_in):
                        if a_l[k] > 0.0:
                            Wk = W[k * d_out : (k + 1) * d_out]
                            s = 0.0
                            for j in range(d_out):
                                s += Wk[j] * dl[j]
                            prev[k] = s
                        else:
                            prev[k] = 0.0
            scale = 1.0
            norm = np.sqrt(sq)
            if norm > clip:
                scale = clip / norm
            for l in range(n_layers):
                d_in = dims[l]
                d_out = dims[l + 1]
                a_l = acts[l, :d_in]
                dl = deltas[l, :d_out]
                G = out[offsets[l] : offsets[l] + d_in * d_out]
                for k in range(d_in):
                    a = a_l[k] * scale
                    if a != 0.0:
                        Gk = G[k * d_out : (k + 1) * d_out]
                        for j in range(d_out):
                            Gk[j] += a * dl[j]
                gb = out[offsets[l] + d_in * d_out : offsets[l + 1]]
                for j in range(d_out):
                    gb[j] += scale * dl[j]
        return out, loss

    @numba.njit(cache=True)
    def _batched_forward_nb(theta, dims, X, offsets):
        """Activations of every layer, stored row-major in one flat buffer."""
        n = X.shape[0]
        n_layers = dims.shape[0] - 1
        aoff = np.zeros(n_layers + 2, dtype=np.int64)
        for l in range(n_layers + 1):
            aoff[l + 1] = aoff[l] + n * dims[l]
        buf = np.empty(aoff[n_layers + 1])
        buf[: n * dims[0]] = X.ravel()
        for l in range(n_layers):
            d_in = dims[l]
            d_out = dims[l + 1]
            A = buf[aoff[l] : aoff[l + 1]].reshape((n, d_in))
            W = theta[offsets[l] : offsets[l] + d_in * d_out].reshape((d_in, d_out))
            b = theta[offsets[l] + d_in * d_out : offsets[l + 1]]
            Z = np.dot(A, W) + b
            if l < n_layers - 1:
                Z = np.maximum(Z, 0.0)
            buf[aoff[l + 1] : aoff[l + 2]] = Z.ravel()
        return buf, aoff

    @numba.njit(cache=True)
    def _param_offsets_nb(dims):
        n_layers = dims.shape[0] - 1
        offsets = np.empty(n_layers + 1, dtype=np.int64)
        offsets[0] = 0
        for l in range(n_layers):
            offsets[l + 1] = offsets[l] + (dims[l] + 1) * dims[l + 1]
        return offsets

    @numba.njit(cache=True)
    def _clipped_grad_sum_batched_nb(theta, dims, X, y, clip):
        n = X.shape[0]
        n_layers = dims.shape[0] - 1
        offsets = _param_offsets_nb(dims)
        buf, aoff = _batched_forward_nb(theta, dims, X, offsets)
        c = dims[n_layers]
        D = buf[aoff[n_layers] : aoff[n_layers + 1]].reshape((n, c)).copy()
        loss = 0.0
        for i in range(n):
            zmax = D[i].max()
            tot = 0.0
            for j in range(c):
                D[i, j] = np.exp(D[i, j] - zmax)
                tot += D[i, j]
            for j in range(c):
                D[i, j] /= tot
            py = D[i, y[i]]
            if py < 1e-12:
                py = 1e-12
            loss -= np.log(py)
            D[i, y[i]] -= 1.0
        deltas = [D]
        for l in range(n_layers - 1, 0, -1):
            d_in = dims[l]
            d_out = dims[l + 1]
            W = theta[offsets[l] : offsets[l] + d_in * d_out].reshape((d_in, d_out))
            A = buf[aoff[l] : aoff[l + 1]].reshape((n, d_in))
            P = np.dot(deltas[-1], W.T)
            for i in range(n):
                for k in range(d_in):
                    if A[i, k] <= 0.0:
                        P[i, k] = 0.0
            deltas.append(P)
        sq = np.zeros(n)
        for l in range(n_layers):
            A = buf[aoff[l] : aoff[l + 1]].reshape((n, dims[l]))
            Dl = deltas[n_layers - 1 - l]
            for i in range(n):
                sq[i] += (1.0 + np.dot(A[i], A[i])) * np.dot(Dl[i], Dl[i])
        scale = np.ones(n)
        for i in range(n):
            norm = np.sqrt(sq[i])
            if norm > clip:
                scale[i] = clip / norm
        out = np.empty(theta.shape[0])
        for l in range(n_layers):
            d_in = dims[l]
            d_out = dims[l + 1]
            A = buf[aoff[l] : aoff[l + 1]].reshape((n, d_in))
            S = deltas[n_layers - 1 - l] * scale.reshape((n, 1))
            out[offsets[l] : offsets[l] + d_in * d_out] = np.dot(A.T, S).ravel()
            out[offsets[l] + d_in * d_out : offsets[l + 1]] = S.sum(axis=0)
        return out, loss

    @numba.njit(cache=True)
    def _predict_nb(theta, dims, X):
        n = X.shape[0]
        n_layers = dims.shape[0] - 1
        buf, aoff = _batched_forward_nb(theta, dims, X, _param_offsets_nb(dims))
        Z = buf[aoff[n_layers] : aoff[n_layers + 1]].reshape((n, dims[n_layers]))
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = np.argmax(Z[i])
        return out


# ---------------------------------------------------------------- dispatch


def clipped_grad_sum(theta, dims, X, y, clip):
    """Sum over the batch of per-example gradients, each clipped to L2 norm ``clip``.

    Returns ``(grad_sum, loss_sum)``; ``clip=np.inf`` disables clipping.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if _ENABLED:
        kernel = _clipped_grad_sum_nb if X.shape[0] < FUSED_MAX_BATCH else _clipped_grad_sum_batched_nb
        out, loss = kernel(theta, dims, X, y, float(clip))
        return out, float(loss)
    return clipped_grad_sum_np(theta, dims, X, y, float(clip))


def predict(theta, dims, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if _ENABLED and X.shape[0] <= PREDICT_NB_MAX_BATCH:
        return _predict_nb(theta, dims, X)
    return predict_np(theta, dims, X)
