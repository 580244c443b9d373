"""Neural network layers with hand-written forward and backward passes.

Every layer works on a leading batch axis and caches what its backward pass
needs during ``forward``. ``backward(dout)`` fills ``self.grads`` (same keys
and shapes as ``self.params``) and returns the gradient with respect to the
layer input. Gradients are overwritten on each call, never accumulated.

Shape conventions (batch axis first):

* ``Conv2D`` / ``MaxPool2D``: ``[B, C, H, W]``
* ``Dense``: ``[B, features]``
* ``GRU`` / ``LSTM``: ``[B, T, features]``
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, SeededRng, ShapeError, log_softmax, seeded_uniform, sigmoid, softmax


def glorot(shape, fan_in: int, fan_out: int, rng: SeededRng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return seeded_uniform(shape, -limit, limit, rng)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample input shape."""
        raise NotImplementedError

    def clear_cache(self) -> None:
        for attr in list(vars(self)):
            if attr.startswith("_c_"):
                setattr(self, attr, None)


class Conv2D(Layer):
    """Valid, stride-1 cross-correlation with one bias per output channel."""

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int], rng: SeededRng):
        super().__init__()
        kh, kw = kernel
        self.kernel = (kh, kw)
        fan_in = in_channels * kh * kw
        fan_out = out_channels * kh * kw
        self.params["W"] = glorot((out_channels, in_channels, kh, kw), fan_in, fan_out, rng)
        self.params["b"] = np.zeros(out_channels, dtype=DTYPE)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        o, ci, kh, kw = self.params["W"].shape
        if c != ci:
            raise ShapeError(f"Conv2D expects {ci} input channels, got {c}")
        if kh > h or kw > w:
            raise ShapeError(f"Conv2D kernel {kh}x{kw} larger than input {h}x{w}")
        return (o, h - kh + 1, w - kw + 1)

    def forward(self, x):
        W, b = self.params["W"], self.params["b"]
        B = x.shape[0]
        o, ho, wo = self.output_shape(x.shape[1:])
        # [B, C, Ho, Wo, kh, kw] -> rows of receptive fields
        win = sliding_window_view(x, self.kernel, axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, -1)
        out = cols @ W.reshape(o, -1).T + b
        self._c_cols = cols
        self._c_in_shape = x.shape
        return out.reshape(B, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, dout):
        W = self.params["W"]
        o, c, kh, kw = W.shape
        B, _, h, w = self._c_in_shape
        ho, wo = dout.shape[2], dout.shape[3]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads["W"] = (d2.T @ self._c_cols).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ W.reshape(o, -1)).reshape(B, ho, wo, c, kh, kw)
        dx = np.zeros(self._c_in_shape, dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties send the whole gradient to the first maximum in row-major window order.
    """

    def __init__(self, pool: tuple[int, int]):
        super().__init__()
        ph, pw = pool
        if ph < 1 or pw < 1:
            raise ValueError(f"pool size must be >= 1, got {pool}")
        self.pool = (ph, pw)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ph, pw = self.pool
        if ph > h or pw > w:
            raise ShapeError(f"pool {ph}x{pw} larger than input {h}x{w}")
        return (c, h // ph, w // pw)

    def forward(self, x):
        ph, pw = self.pool
        B = x.shape[0]
        c, ho, wo = self.output_shape(x.shape[1:])
        crop = x[:, :, :ho * ph, :wo * pw]
        win = crop.reshape(B, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, c, ho, wo, ph * pw)
        idx = win.argmax(axis=-1)
        self._c_idx = idx
        self._c_in_shape = x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        ph, pw = self.pool
        B, c, h, w = self._c_in_shape
        ho, wo = dout.shape[2], dout.shape[3]
        win = np.zeros((B, c, ho, wo, ph * pw), dtype=dout.dtype)
        np.put_along_axis(win, self._c_idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(self._c_in_shape, dtype=dout.dtype)
        dx[:, :, :ho * ph, :wo * pw] = (
            win.reshape(B, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, c, ho * ph, wo * pw)
        )
        return dx


class ReLU(Layer):
    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        self._c_mask = x > 0
        return np.where(self._c_mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._c_mask, dout, 0.0)


class Flatten(Layer):
    """Row-major flattening of everything after the batch axis."""

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._c_in_shape = x.shape
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._c_in_shape)


class Dense(Layer):
    """``y = act(x @ w.T + b)`` with ``w`` stored as ``[out, in]``."""

    ACTIVATIONS = ("none", "relu", "softmax")

    def __init__(self, n_in: int, n_out: int, rng: SeededRng, activation: str = "none"):
        super().__init__()
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown dense activation {activation!r}")
        self.activation = activation
        self.params["w"] = glorot((n_out, n_in), n_in, n_out, rng)
        self.params["b"] = np.zeros(n_out, dtype=DTYPE)

    def output_shape(self, in_shape):
        n_out, n_in = self.params["w"].shape
        if tuple(in_shape) != (n_in,):
            raise ShapeError(f"Dense expects input ({n_in},), got {tuple(in_shape)}")
        return (n_out,)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        a = x @ self.params["w"].T + self.params["b"]
        if self.activation == "relu":
            y = np.maximum(a, 0.0)
        elif self.activation == "softmax":
            y = softmax(a)
        else:
            y = a
        self._c_x = x
        self._c_a = a
        self._c_y = y
        return y

    def backward(self, dout):
        if self.activation == "relu":
            da = np.where(self._c_a > 0, dout, 0.0)
        elif self.activation == "softmax":
            y = self._c_y
            da = y * (dout - (dout * y).sum(axis=-1, keepdims=True))
        else:
            da = dout
        self.grads["w"] = da.T @ self._c_x
        self.grads["b"] = da.sum(axis=0)
        return da @ self.params["w"]


def softmax_xent(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities and per-sample cross-entropy ``-log p[label]``.

    Works on a single logit vector or a ``[B, k]`` batch. The loss is taken
    from the log-sum-exp form, so large logits never overflow.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    lab = np.atleast_1d(np.asarray(labels))
    k = z.shape[-1]
    if lab.shape[0] != z.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any((lab < 0) | (lab >= k)):
        raise ValueError(f"label out of range for {k} classes: {lab.tolist()}")
    lab = lab.astype(np.intp)
    logp = log_softmax(z)
    loss = -logp[np.arange(z.shape[0]), lab]
    probs = np.exp(logp)
    if single:
        return probs[0], loss[0]
    return probs, loss


def softmax_xent_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Per-sample gradient of the cross-entropy with respect to the logits."""
    g = np.array(probs, dtype=DTYPE, copy=True)
    if g.ndim == 1:
        g[int(labels)] -= 1.0
    else:
        g[np.arange(g.shape[0]), np.asarray(labels, dtype=np.intp)] -= 1.0
    return g


def gru_gates(x_t: np.ndarray, h_prev: np.ndarray, p: dict[str, np.ndarray]):
    """One GRU step returning ``(r, z, h_reset, cand, h)``.

    Gates act on the concatenation ``[h_prev, x_t]``; ``p`` holds ``W_r, W_z,
    W`` of shape ``[hidden, hidden + input]`` and biases ``b_r, b_z, b``.
    Inputs may be vectors or ``[B, *]`` batches.
    """
    hidden = p["b"].shape[0]
    if h_prev.shape[-1] != hidden or p["W"].shape[1] != hidden + x_t.shape[-1]:
        raise ShapeError(
            f"gru_cell_step: x {x_t.shape}, h {h_prev.shape} do not fit W {p['W'].shape}"
        )
    hx = np.concatenate([h_prev, x_t], axis=-1)
    r = sigmoid(hx @ p["W_r"].T + p["b_r"])
    z = sigmoid(hx @ p["W_z"].T + p["b_z"])
    h_reset = r * h_prev
    cand = np.tanh(np.concatenate([h_reset, x_t], axis=-1) @ p["W"].T + p["b"])
    h = h_prev * (1.0 - z) + cand * z
    return r, z, h_reset, cand, h


def gru_cell_step(x_t: np.ndarray, h_prev: np.ndarray, p: dict[str, np.ndarray]) -> np.ndarray:
    return gru_gates(x_t, h_prev, p)[-1]


class _GRULayer(Layer):
    def __init__(self, n_in: int, hidden: int, rng: SeededRng):
        super().__init__()
        self.hidden = hidden
        for name in ("W_r", "W_z", "W"):
            self.params[name] = glorot((hidden, hidden + n_in), hidden + n_in, hidden, rng.child(name))
        for name in ("b_r", "b_z", "b"):
            self.params[name] = np.zeros(hidden, dtype=DTYPE)

    def forward(self, x):
        p = self.params
        H = self.hidden
        B, T, _ = x.shape
        Wr, Wz, Wc = p["W_r"], p["W_z"], p["W"]
        # the x-part of every gate is independent of h, so project all steps at once
        x_rz = x @ np.concatenate([Wr[:, H:], Wz[:, H:]]).T + np.concatenate([p["b_r"], p["b_z"]])
        x_c = x @ Wc[:, H:].T + p["b"]
        Wh_rz = np.concatenate([Wr[:, :H], Wz[:, :H]]).T
        Wh_c = Wc[:, :H].T

        hs = np.zeros((T + 1, B, H), dtype=x.dtype)
        rs = np.empty((T, B, H), dtype=x.dtype)
        zs = np.empty_like(rs)
        cs = np.empty_like(rs)
        for t in range(T):
            h = hs[t]
            rz = sigmoid(h @ Wh_rz + x_rz[:, t])
            r, z = rz[:, :H], rz[:, H:]
            c = np.tanh((r * h) @ Wh_c + x_c[:, t])
            hs[t + 1] = h * (1.0 - z) + c * z
            rs[t], zs[t], cs[t] = r, z, c
        self._c_x = x
        self._c_hs, self._c_rs, self._c_zs, self._c_cs = hs, rs, zs, cs
        return hs[1:].transpose(1, 0, 2).copy()

    def backward(self, dout):
        p = self.params
        H = self.hidden
        x = self._c_x
        hs, rs, zs, cs = self._c_hs, self._c_rs, self._c_zs, self._c_cs
        B, T, _ = x.shape
        Wr, Wz, Wc = p["W_r"], p["W_z"], p["W"]
        Wh_rz = np.concatenate([Wr[:, :H], Wz[:, :H]])
        Wh_c = Wc[:, :H]

        d_rz = np.empty((T, B, 2 * H), dtype=x.dtype)
        d_c = np.empty((T, B, H), dtype=x.dtype)
        dh = np.zeros((B, H), dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            h, r, z, c = hs[t], rs[t], zs[t], cs[t]
            dh = dh + dout[:, t]
            da_c = dh * z * (1.0 - c * c)
            dz = dh * (c - h)
            dh_prev = dh * (1.0 - z)
            dhr = da_c @ Wh_c
            dr = dhr * h
            dh_prev += dhr * r
            da_rz = np.concatenate([dr * r * (1.0 - r), dz * z * (1.0 - z)], axis=1)
            dh_prev += da_rz @ Wh_rz
            d_rz[t] = da_rz
            d_c[t] = da_c
            dh = dh_prev

        # weight gradients over all steps in one contraction
        xs = x.transpose(1, 0, 2).reshape(T * B, -1)
        h_prev = hs[:-1].reshape(T * B, H)
        hr = (rs * hs[:-1]).reshape(T * B, H)
        g_rz = d_rz.reshape(T * B, 2 * H)
        g_c = d_c.reshape(T * B, H)
        g_rz_h = g_rz.T @ h_prev
        g_rz_x = g_rz.T @ xs
        self.grads["W_r"] = np.concatenate([g_rz_h[:H], g_rz_x[:H]], axis=1)
        self.grads["W_z"] = np.concatenate([g_rz_h[H:], g_rz_x[H:]], axis=1)
        self.grads["W"] = np.concatenate([g_c.T @ hr, g_c.T @ xs], axis=1)
        self.grads["b_r"] = g_rz[:, :H].sum(axis=0)
        self.grads["b_z"] = g_rz[:, H:].sum(axis=0)
        self.grads["b"] = g_c.sum(axis=0)
        dx = g_rz @ np.concatenate([Wr[:, H:], Wz[:, H:]]) + g_c @ Wc[:, H:]
        return dx.reshape(T, B, -1).transpose(1, 0, 2)


class _LSTMLayer(Layer):
    GATES = ("i", "f", "o", "g")

    def __init__(self, n_in: int, hidden: int, rng: SeededRng):
        super().__init__()
        self.hidden = hidden
        for g in self.GATES:
            self.params[f"W_{g}"] = glorot((hidden, hidden + n_in), hidden + n_in, hidden, rng.child(g))
        for g in self.GATES:
            self.params[f"b_{g}"] = np.zeros(hidden, dtype=DTYPE)

    def _stacked(self):
        p = self.params
        W = np.concatenate([p[f"W_{g}"] for g in self.GATES])
        b = np.concatenate([p[f"b_{g}"] for g in self.GATES])
        return W, b

    def forward(self, x):
        H = self.hidden
        B, T, _ = x.shape
        W, b = self._stacked()
        x_proj = x @ W[:, H:].T + b
        Wh = W[:, :H].T
        hs = np.zeros((T + 1, B, H), dtype=x.dtype)
        cs = np.zeros((T + 1, B, H), dtype=x.dtype)
        gates = np.empty((T, B, 4 * H), dtype=x.dtype)
        for t in range(T):
            a = hs[t] @ Wh + x_proj[:, t]
            sig = sigmoid(a[:, :3 * H])
            g = np.tanh(a[:, 3 * H:])
            i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            gates[t, :, :3 * H] = sig
            gates[t, :, 3 * H:] = g
        self._c_x, self._c_hs, self._c_cs, self._c_gates = x, hs, cs, gates
        return hs[1:].transpose(1, 0, 2).copy()

    def backward(self, dout):
        H = self.hidden
        x, hs, cs, gates = self._c_x, self._c_hs, self._c_cs, self._c_gates
        B, T, _ = x.shape
        W, _ = self._stacked()
        Wh = W[:, :H]
        da_all = np.empty((T, B, 4 * H), dtype=x.dtype)
        dh = np.zeros((B, H), dtype=x.dtype)
        dc = np.zeros((B, H), dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            i, f, o, g = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
            tc = np.tanh(cs[t + 1])
            dh = dh + dout[:, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * cs[t] * f * (1.0 - f),
                    dh * tc * o * (1.0 - o),
                    dc * i * (1.0 - g * g),
                ],
                axis=1,
            )
            da_all[t] = da
            dh = da @ Wh
            dc = dc * f
        xs = x.transpose(1, 0, 2).reshape(T * B, -1)
        g2 = da_all.reshape(T * B, 4 * H)
        gW = np.concatenate([g2.T @ hs[:-1].reshape(T * B, H), g2.T @ xs], axis=1)
        gb = g2.sum(axis=0)
        for k, name in enumerate(self.GATES):
            self.grads[f"W_{name}"] = gW[k * H:(k + 1) * H]
            self.grads[f"b_{name}"] = gb[k * H:(k + 1) * H]
        dx = g2 @ W[:, H:]
        return dx.reshape(T, B, -1).transpose(1, 0, 2)


class _Recurrent(Layer):
    cell = _GRULayer

    def __init__(self, n_in: int, hidden: int, rng: SeededRng, num_layers: int = 2):
        super().__init__()
        if hidden < 1 or num_layers < 1:
            raise ValueError("hidden size and layer count must be positive")
        self.n_in = n_in
        self.hidden = hidden
        self.layers = []
        for k in range(num_layers):
            layer = self.cell(n_in if k == 0 else hidden, hidden, rng.child(f"layer{k}"))
            self.layers.append(layer)
            for name, arr in layer.params.items():
                self.params[f"l{k}.{name}"] = arr

    def output_shape(self, in_shape):
        T, d = in_shape
        if d != self.n_in:
            raise ShapeError(f"{type(self).__name__} expects {self.n_in} features per step, got {d}")
        return (T, self.hidden)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for k in range(len(self.layers) - 1, -1, -1):
            dout = self.layers[k].backward(dout)
            for name, g in self.layers[k].grads.items():
                self.grads[f"l{k}.{name}"] = g
        return dout

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()


class GRU(_Recurrent):
    """Stacked GRU; each layer starts from a zero hidden state and the next
    layer reads the previous layer's full hidden sequence. Returns ``[B, T, hidden]``."""

    cell = _GRULayer


class LSTM(_Recurrent):
    """Stacked LSTM (input, forget, output gates and tanh candidate), zero initial state."""

    cell = _LSTMLayer


class Transpose(Layer):
    """Swaps the two per-sample axes of a ``[B, A, C]`` tensor."""

    def output_shape(self, in_shape):
        a, c = in_shape
        return (c, a)

    def forward(self, x):
        return x.transpose(0, 2, 1)

    def backward(self, dout):
        return dout.transpose(0, 2, 1)


class Reshape(Layer):
    def __init__(self, shape: tuple):
        super().__init__()
        self.shape = tuple(shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(in_shape)} to {self.shape}")
        return self.shape

    def forward(self, x):
        self._c_in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self._c_in_shape)


class LastStep(Layer):
    """Keeps only the final timestep of a ``[B, T, F]`` sequence."""

    def output_shape(self, in_shape):
        return (in_shape[1],)

    def forward(self, x):
        self._c_in_shape = x.shape
        return x[:, -1]

    def backward(self, dout):
        dx = np.zeros(self._c_in_shape, dtype=dout.dtype)
        dx[:, -1] = dout
        return dx


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = layers
        for lname, layer in layers:
            for pname, arr in layer.params.items():
                self.params[f"{lname}.{pname}"] = arr

    def output_shape(self, in_shape):
        for _, layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for lname, layer in reversed(self.layers):
            dout = layer.backward(dout)
            for pname, g in layer.grads.items():
                self.grads[f"{lname}.{pname}"] = g
        return dout

    def clear_cache(self):
        for _, layer in self.layers:
            layer.clear_cache()
