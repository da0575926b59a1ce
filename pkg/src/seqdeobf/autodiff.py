"""A small reverse-mode autodiff tape over numpy arrays.

Only the handful of fused operations the recurrent models need are provided,
each with a hand-written backward.  A tape created with ``record=False``
computes values only, which is how inference runs.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -1e30


class Tensor:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self._ops: list = []

    def _out(self, value, *inputs) -> Tensor:
        return Tensor(value, self.record and any(t.requires_grad for t in inputs))

    def _push(self, out: Tensor, fn) -> None:
        if out.requires_grad:
            self._ops.append(fn)

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()

    # -- elementary ops ---------------------------------------------------

    def embedding(self, table: Tensor, ids, frozen_row: int | None = None) -> Tensor:
        ids = np.asarray(ids)
        out = self._out(table.value[ids], table)

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(table.value)
            np.add.at(g, ids, out.grad)
            if frozen_row is not None:
                g[frozen_row] = 0.0
            table.accumulate(g)

        self._push(out, back)
        return out

    def linear(self, x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
        y = x.value @ W.value
        if b is not None:
            y = y + b.value
        ins = (x, W) if b is None else (x, W, b)
        out = self._out(y, *ins)

        def back():
            g = out.grad
            if g is None:
                return
            x2 = x.value.reshape(-1, x.value.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            W.accumulate(x2.T @ g2)
            if b is not None:
                b.accumulate(g2.sum(axis=0))
            x.accumulate(g @ W.value.T)

        self._push(out, back)
        return out

    def concat(self, parts: list[Tensor]) -> Tensor:
        out = self._out(np.concatenate([p.value for p in parts], axis=-1), *parts)
        sizes = np.cumsum([p.value.shape[-1] for p in parts])[:-1]

        def back():
            if out.grad is None:
                return
            for p, g in zip(parts, np.split(out.grad, sizes, axis=-1)):
                p.accumulate(g)

        self._push(out, back)
        return out

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.value)
        out = self._out(y, x)

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * (1.0 - y * y))

        self._push(out, back)
        return out

    def stack(self, parts: list[Tensor], axis: int = 1) -> Tensor:
        out = self._out(np.stack([p.value for p in parts], axis=axis), *parts)

        def back():
            if out.grad is None:
                return
            for i, p in enumerate(parts):
                p.accumulate(np.take(out.grad, i, axis=axis))

        self._push(out, back)
        return out

    # -- fused recurrent / attention / loss ops ---------------------------

    def lstm_cell(self, x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor, mask=None):
        """One LSTM step with gates ordered (i, f, g, o).

        ``W`` is ``(in + hidden, 4 * hidden)``.  Rows where ``mask`` is 0 carry
        the previous state through unchanged.
        """
        H = h.value.shape[-1]
        n_in = x.value.shape[-1]
        xh = np.concatenate([x.value, h.value], axis=-1)
        z = xh @ W.value + b.value
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        cn = f * c.value + i * g
        tc = np.tanh(cn)
        hn = o * tc
        if mask is not None:
            m = np.asarray(mask, dtype=hn.dtype)[:, None]
            hn = m * hn + (1.0 - m) * h.value
            cn = m * cn + (1.0 - m) * c.value
        else:
            m = None
        h_out = self._out(hn, x, h, c, W, b)
        c_out = self._out(cn, x, h, c, W, b)

        def back():
            gh = h_out.grad if h_out.grad is not None else np.zeros_like(hn)
            gc = c_out.grad if c_out.grad is not None else np.zeros_like(cn)
            if m is not None:
                h.accumulate((1.0 - m) * gh)
                c.accumulate((1.0 - m) * gc)
                gh, gc = m * gh, m * gc
            do = gh * tc
            dcn = gc + gh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [dcn * g * i * (1.0 - i), dcn * c.value * f * (1.0 - f), dcn * i * (1.0 - g * g), do * o * (1.0 - o)],
                axis=-1,
            )
            c.accumulate(dcn * f)
            W.accumulate(xh.T @ dz)
            b.accumulate(dz.sum(axis=0))
            dxh = dz @ W.value.T
            x.accumulate(dxh[:, :n_in])
            h.accumulate(dxh[:, n_in:])

        if h_out.requires_grad:
            self._ops.append(back)
        return h_out, c_out

    def attention(self, q: Tensor, keys: Tensor, mask) -> Tensor:
        """Dot-product attention: softmax(keys . q) weighted average of ``keys``."""
        mask = np.asarray(mask, dtype=bool)
        s = np.einsum("bh,bth->bt", q.value, keys.value)
        s = np.where(mask, s, NEG_INF)
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s) * mask
        a = a / np.maximum(a.sum(axis=1, keepdims=True), 1e-300)
        out = self._out(np.einsum("bt,bth->bh", a, keys.value), q, keys)

        def back():
            g = out.grad
            if g is None:
                return
            da = np.einsum("bh,bth->bt", g, keys.value)
            ds = a * (da - np.sum(a * da, axis=1, keepdims=True))
            keys.accumulate(a[:, :, None] * g[:, None, :] + ds[:, :, None] * q.value[:, None, :])
            q.accumulate(np.einsum("bt,bth->bh", ds, keys.value))

        self._push(out, back)
        return out

    def nll_loss(self, logits: Tensor, targets, weights) -> Tensor:
        """Weighted mean of -log_softmax(logits)[target] over rows with weight > 0.

        Returns 0 (and no gradient) when every weight is zero.
        """
        z = logits.value.reshape(-1, logits.value.shape[-1])
        t = np.asarray(targets).reshape(-1)
        w = np.asarray(weights, dtype=z.dtype).reshape(-1)
        total = w.sum()
        logp = log_softmax(z)
        if total == 0:
            return Tensor(np.array(0.0))
        loss = -np.sum(w * logp[np.arange(len(t)), t]) / total
        out = self._out(np.array(loss), logits)

        def back():
            g = np.exp(logp)
            g[np.arange(len(t)), t] -= 1.0
            g *= (w / total)[:, None] * out.grad
            logits.accumulate(g.reshape(logits.value.shape))

        self._push(out, back)
        return out


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Optimizers


def global_norm(params) -> float:
    return float(np.sqrt(sum(np.sum(p.grad**2) for p in params if p.grad is not None)))


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class SGD:
    def __init__(self, params, lr: float = 1.0, clip: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.clip = clip

    def step(self) -> float:
        norm = clip_gradients(self.params, self.clip) if self.clip else global_norm(self.params)
        for p in self.params:
            if p.grad is not None:
                p.value -= self.lr * p.grad
            p.grad = None
        return norm


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> float:
        norm = clip_gradients(self.params, self.clip) if self.clip else global_norm(self.params)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None
        return norm


def make_optimizer(name: str, params, lr: float, clip: float | None):
    if name == "sgd":
        return SGD(params, lr, clip)
    if name == "adam":
        return Adam(params, lr, clip=clip)
    raise ValueError(f"unknown optimizer {name!r}")
