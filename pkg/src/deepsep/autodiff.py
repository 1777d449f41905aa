"""Tape-based reverse-mode automatic differentiation over dense float64 tensors.

The op set is deliberately small: exactly what the separation network's
forward pass and training loop need (1-D same-padded convolution, channel
concatenation, ReLU, sigmoid, elementwise product, the |c - v| gate, addition
and MSE), plus the Adam update rule.

Recording model: ops compute eagerly on numpy buffers. While a ``Graph`` is
active on the current thread, every op whose inputs participate in
differentiation appends a node to the tape; ``backward`` then walks the tape
in exact reverse append order. A graph is single-use: it is rebuilt on every
forward pass and rejects a second backward.

Gradient buffers are handed off, not copied: a backward closure must only
pass arrays it owns (or the incoming output gradient, at most once) to
``_accumulate``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.linalg.blas import dgemm
from scipy.special import expit


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``node_id`` links the tensor to the position of the op that produced it
    on the active graph's tape; leaves have ``node_id is None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.graph: "Graph | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("tag", "inputs", "output", "backward_fn")

    def __init__(self, tag, inputs, output, backward_fn):
        self.tag = tag
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tls = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_tls, "graph", None)


class Graph:
    """Append-only tape of recorded ops, confined to one thread.

    Use as a context manager around a forward pass::

        with Graph():
            loss = mse_loss(forward(...), target)
        backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._backward_run = False

    def __enter__(self) -> "Graph":
        if _active_graph() is not None:
            raise RuntimeError("a Graph is already recording on this thread")
        _tls.graph = self
        return self

    def __exit__(self, *exc):
        _tls.graph = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _record(tag: str, inputs: Sequence[Tensor], out: Tensor,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    g = _active_graph()
    if g is None:
        return out
    if g._backward_run:
        raise RuntimeError("graph already consumed by backward; re-run the forward pass")
    if not any(t.requires_grad or t.node_id is not None for t in inputs):
        return out
    out.node_id = len(g.nodes)
    out.graph = g
    g.nodes.append(_Node(tag, tuple(inputs), out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t.node_id is not None):
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every participating tensor with d(loss)/d(tensor).

    Gradients accumulate additively across fan-out. The loss must be a scalar
    produced under an active ``Graph``; a graph supports exactly one backward.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    g = loss.graph
    if g is None:
        raise RuntimeError("loss was not recorded on a graph; run the forward pass inside 'with Graph():'")
    if g._backward_run:
        raise RuntimeError("backward already ran on this graph; re-run the forward pass")
    g._backward_run = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(g.nodes):
        gout = node.output.grad
        if gout is None:
            continue
        node.backward_fn(gout)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a @ b in place. All three must be C-contiguous float64."""
    r = dgemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)
    if r.base is not c and r.base is not getattr(c, "base", None):
        raise RuntimeError("BLAS in-place accumulation failed (non-contiguous operand?)")


def _check_conv_args(x: Tensor, weights, biases):
    if x.ndim != 3:
        raise ValueError(f"conv input must be [batch, channels, length], got shape {x.shape}")
    cin = x.shape[1]
    for w, b in zip(weights, biases):
        if w.ndim != 3:
            raise ValueError(f"conv weight must be [out, in, kernel], got shape {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ValueError(f"kernel width must be odd, got {w.shape[2]}")
        if w.shape[1] != cin:
            raise ValueError(f"channel mismatch: input has {cin} channels, weight expects {w.shape[1]}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")


def multi_conv1d_same(x: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor]) -> Tensor:
    """Several same-padded 1-D convolutions of one input, concatenated on channels.

    Equivalent to ``concat_channels([conv1d_same(x, w_i, b_i) ...])`` but the
    padded input is laid out once and shared across kernels. Each kernel uses
    zero padding of (K-1)/2, cross-correlation convention (no kernel flip);
    output length equals input length for every kernel.

    The batch is flattened along time with Kmax-1 zero samples between
    segments, so each kernel tap becomes one tall BLAS gemm; the gap width
    guarantees no cross-segment leakage.
    """
    _check_conv_args(x, [w.data for w in weights], [b.data for b in biases])
    B, Cin, L = x.shape
    ks = [w.shape[2] for w in weights]
    kmax = max(ks)
    pad = (kmax - 1) // 2
    lp = L + kmax - 1
    t_rows = B * lp - (kmax - 1)

    zt = np.zeros((B * lp, Cin))
    zt.reshape(B, lp, Cin)[:, pad:pad + L, :] = x.data.transpose(0, 2, 1)

    outs_cl = []
    for w, b in zip(weights, biases):
        cout, _, k = w.shape
        off = (kmax - k) // 2
        ybuf = np.zeros((B * lp, cout))
        wk = np.ascontiguousarray(w.data.transpose(2, 1, 0))  # [K, Cin, Cout]
        for j in range(k):
            _gemm_acc(zt[off + j:off + j + t_rows], wk[j], ybuf[:t_rows])
        y = ybuf.reshape(B, lp, cout)[:, :L, :]
        y += b.data
        outs_cl.append(y)

    cat = outs_cl[0] if len(outs_cl) == 1 else np.concatenate(outs_cl, axis=2)
    out = Tensor(np.ascontiguousarray(cat.transpose(0, 2, 1)))

    weights = tuple(weights)
    biases = tuple(biases)

    def bwd(gout: np.ndarray) -> None:
        gy_cl = gout.transpose(0, 2, 1)  # [B, L, sum(Cout)] view
        any_x_grad = x.requires_grad or x.node_id is not None
        gzt = np.zeros_like(zt) if any_x_grad else None
        col = 0
        for w, b in zip(weights, biases):
            cout, _, k = w.data.shape
            off = (kmax - k) // 2
            gybuf = np.zeros((B * lp, cout))
            gybuf.reshape(B, lp, cout)[:, :L, :] = gy_cl[:, :, col:col + cout]
            col += cout
            _accumulate(b, gybuf.sum(axis=0))
            if w.requires_grad or w.node_id is not None:
                gw = np.empty_like(w.data)
                for j in range(k):
                    gw[:, :, j] = dgemm(1.0, gybuf[:t_rows].T,
                                        zt[off + j:off + j + t_rows].T, trans_b=1)
                _accumulate(w, gw)
            if any_x_grad:
                wkt = np.ascontiguousarray(w.data.transpose(2, 0, 1))  # [K, Cout, Cin]
                for j in range(k):
                    _gemm_acc(gybuf[:t_rows], wkt[j], gzt[off + j:off + j + t_rows])
        if any_x_grad:
            gx = np.ascontiguousarray(
                gzt.reshape(B, lp, Cin)[:, pad:pad + L, :].transpose(0, 2, 1))
            _accumulate(x, gx)

    return _record("multi_conv1d_same", (x, *weights, *biases), out, bwd)


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1-D convolution: [B,Cin,L] x [Cout,Cin,K] -> [B,Cout,L].

    Zero padding of (K-1)/2 per side, cross-correlation convention. K must be
    odd; output length equals input length for any L >= 1.
    """
    return multi_conv1d_same(x, [weight], [bias])


# --------------------------------------------------------------------------
# elementwise and reduction ops
# --------------------------------------------------------------------------

def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate [B,Ci,L] tensors along the channel axis, in argument order."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    b0, l0 = inputs[0].shape[0], inputs[0].shape[2]
    for t in inputs:
        if t.ndim != 3 or t.shape[0] != b0 or t.shape[2] != l0:
            raise ValueError(f"concat_channels inputs must share batch and length; "
                             f"got {[tuple(t.shape) for t in inputs]}")
    if len(inputs) == 1:
        return inputs[0]
    out = Tensor(np.concatenate([t.data for t in inputs], axis=1))
    inputs = tuple(inputs)

    def bwd(gout: np.ndarray) -> None:
        c = 0
        for t in inputs:
            ci = t.shape[1]
            _accumulate(t, np.ascontiguousarray(gout[:, c:c + ci, :]))
            c += ci

    return _record("concat_channels", inputs, out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def bwd(gout: np.ndarray) -> None:
        _accumulate(x, gout * mask)

    return _record("relu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic sigmoid; output lies strictly in (0,1) for |x| below ~36."""
    s = expit(x.data)
    out = Tensor(s)

    def bwd(gout: np.ndarray) -> None:
        _accumulate(x, gout * (s * (1.0 - s)))

    return _record("sigmoid", (x,), out, bwd)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elementwise_mul")
    out = Tensor(a.data * b.data)

    def bwd(gout: np.ndarray) -> None:
        _accumulate(a, gout * b.data)
        _accumulate(b, gout * a.data)

    return _record("elementwise_mul", (a, b), out, bwd)


def elementwise_sub_abs(c: float, v: Tensor) -> Tensor:
    """|c - v| for the indicator constant c in {0, 1}.

    For v in (0,1) this is v when c == 0 and 1 - v when c == 1, so the two
    indicator settings produce gates that sum to one.
    """
    if c not in (0, 1, 0.0, 1.0):
        raise ValueError(f"indicator constant must be 0 or 1, got {c!r}")
    c = float(c)
    out = Tensor(np.abs(c - v.data))
    sign = np.sign(v.data - c)

    def bwd(gout: np.ndarray) -> None:
        _accumulate(v, gout * sign)

    return _record("elementwise_sub_abs", (v,), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(gout: np.ndarray) -> None:
        _accumulate(a, gout)
        _accumulate(b, gout.copy())

    return _record("add", (a, b), out, bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference; a scalar tensor."""
    _check_same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    n = diff.size

    def bwd(gout: np.ndarray) -> None:
        scale = 2.0 * gout.reshape(-1)[0] / n
        _accumulate(pred, scale * diff)
        _accumulate(target, (-scale) * diff)

    return _record("mse_loss", (pred, target), out, bwd)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers and step counter for the Adam update."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Bias-corrected adaptive-moment update, in place; clears grads afterward."""
    params = list(params)
    if len(params) != len(state.m):
        raise ValueError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise ValueError("adam_step: a parameter has no gradient; run backward first")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
