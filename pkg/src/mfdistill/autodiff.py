"""Dense float64 tensors with reverse-mode automatic differentiation.

Design notes:
  * Values are always float64; gradient checks need the headroom.
  * A Tensor built from ops whose inputs all have requires_grad=False
    records no tape edges, so frozen-model inference is plain numpy.
  * backward() may be called once per graph; a second call raises.

The op set is exactly what the detector and distillation losses need:
elementwise arithmetic, matmul, shape ops, conv2d / deconv2d / bilinear
upsampling on [C, H, W] maps, softmax, reductions, smooth-L1 / MSE, and
two sparse helpers (neighbor_mean, scatter_max_bev) for voxel features.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .binio import FormatError, Reader, pack_f64s, pack_u16, pack_u32


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_edges", "_backward_done", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._edges: tuple = ()   # ((parent, vjp), ...)
        self._backward_done = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data, edges) -> Tensor:
    """Build a result tensor; edges to non-grad parents are dropped."""
    live = tuple((p, fn) for p, fn in edges if p.requires_grad)
    out = Tensor(data, requires_grad=bool(live))
    out._edges = live
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    for _ in range(extra):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)
    return _make(data, [(a, lambda g: _unbroadcast(g, a.shape)),
                        (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)
    return _make(data, [(a, lambda g: _unbroadcast(g, a.shape)),
                        (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)
    return _make(data, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                        (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, [(a, lambda g: g * s)])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def pow_const(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, [(a, lambda g: g * p * a.data ** (p - 1.0))])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only where unclipped."""
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), [(a, lambda g: g * inside)])


def atan2(y: Tensor, x: Tensor) -> Tensor:
    if y.shape != x.shape:
        raise ShapeError("atan2", y.shape, x.shape)
    denom = y.data ** 2 + x.data ** 2
    return _make(np.arctan2(y.data, x.data),
                 [(y, lambda g: g * x.data / denom),
                  (x, lambda g: -g * y.data / denom)])


# --- linear algebra and shape ops --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data,
                 [(a, lambda g: g @ b.data.T),
                  (b, lambda g: a.data.T @ g)])


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(data, [(a, lambda g: np.transpose(g, inv))])


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)
    return _make(data, [(a, lambda g: g.reshape(a.shape))])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    edges = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        edges.append((t, vjp))
    return _make(data, edges)


def slice_(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return out

    return _make(data, [(a, vjp)])


def index_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError("index_rows", a.shape)
    data = a.data[idx]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _make(data, [(a, vjp)])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (g - dot) * out

    return _make(out, [(a, vjp)])


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.full(a.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(data, [(a, vjp)])


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- losses -------------------------------------------------------------------

def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mse_loss", a.shape, b.shape)
    diff = a.data - b.data
    n = a.size
    data = np.array((diff ** 2).sum() / n)
    return _make(data, [(a, lambda g: g * 2.0 * diff / n),
                        (b, lambda g: -g * 2.0 * diff / n)])


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    if a.shape != b.shape:
        raise ShapeError("smooth_l1", a.shape, b.shape)
    d = a.data - b.data
    quad = np.abs(d) < beta
    data = np.where(quad, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    dd = np.where(quad, d / beta, np.sign(d))
    return _make(data, [(a, lambda g: g * dd), (b, lambda g: -g * dd)])


def smooth_l1_loss(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    return mean(smooth_l1(a, b, beta))


# --- conv / deconv / upsample on [C, H, W] ------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            h_out: int, w_out: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, h_out * w_out))
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride]
            cols[:, ky, kx, :] = patch.reshape(cin, -1)
    return cols.reshape(cin * kh * kw, h_out * w_out)


def _col2im(cols: np.ndarray, cin: int, kh: int, kw: int, stride: int,
            h_out: int, w_out: int, hp: int, wp: int) -> np.ndarray:
    view = cols.reshape(cin, kh, kw, h_out, w_out)
    xp = np.zeros((cin, hp, wp))
    for ky in range(kh):
        for kx in range(kw):
            xp[:, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride] += view[:, ky, kx]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D convolution of x [Cin, H, W] with w [Cout, Cin, kh, kw].

    pad defaults to kh // 2 ("same" for odd kernels at stride 1).
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    cout, cin, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    _, h, wd = x.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    wf = w.data.reshape(cout, -1)
    out = (wf @ cols).reshape(cout, h_out, w_out)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError("conv2d bias", b.shape, (cout,))
        out = out + b.data[:, None, None]

    hp, wp = h + 2 * pad, wd + 2 * pad

    def vjp_x(g):
        dcols = wf.T @ g.reshape(cout, -1)
        dxp = _col2im(dcols, cin, kh, kw, stride, h_out, w_out, hp, wp)
        return dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp

    def vjp_w(g):
        return (g.reshape(cout, -1) @ cols.T).reshape(w.shape)

    edges = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        edges.append((b, lambda g: g.sum(axis=(1, 2))))
    return _make(out, edges)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed conv of x [Cin, H, W] with w [Cin, Cout, kh, kw].

    Fixed pad=kh//2 and output_padding=stride-1, so spatial size scales
    exactly by `stride` (3x3 kernels double H and W at stride 2).
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[0] != w.shape[0]:
        raise ShapeError("deconv2d", x.shape, w.shape)
    cin, cout, kh, kw = w.shape
    pad = kh // 2
    _, h, wd = x.shape
    h_out, w_out = h * stride, wd * stride
    hp, wp = h_out + 2 * pad, w_out + 2 * pad

    wf = w.data.reshape(cin, -1)          # [Cin, Cout*kh*kw]
    dcols = wf.T @ x.data.reshape(cin, -1)
    full = _col2im(dcols, cout, kh, kw, stride, h, wd, hp, wp)
    out = full[:, pad:pad + h_out, pad:pad + w_out]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError("deconv2d bias", b.shape, (cout,))
        out = out + b.data[:, None, None]

    def vjp_x(g):
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(gp, kh, kw, stride, h, wd)
        return (wf @ cols).reshape(x.shape)

    def vjp_w(g):
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(gp, kh, kw, stride, h, wd)
        return (x.data.reshape(cin, -1) @ cols.T).reshape(w.shape)

    edges = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        edges.append((b, lambda g: g.sum(axis=(1, 2))))
    return _make(out, edges)


def _upsample_axis(n_in: int, factor: int):
    """align_corners=False source indices and weights for one axis."""
    dst = np.arange(n_in * factor)
    src = (dst + 0.5) / factor - 0.5
    i0f = np.floor(src)
    w1 = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, w1


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling of [C, H, W] by an integer factor (border replicate)."""
    if x.data.ndim != 3:
        raise ShapeError("bilinear_upsample", x.shape)
    _, h, w = x.shape
    iy0, iy1, wy = _upsample_axis(h, factor)
    ix0, ix1, wx = _upsample_axis(w, factor)
    wy = wy[:, None]
    wx = wx[None, :]
    d = x.data
    out = ((1 - wy) * (1 - wx) * d[:, iy0][:, :, ix0]
           + (1 - wy) * wx * d[:, iy0][:, :, ix1]
           + wy * (1 - wx) * d[:, iy1][:, :, ix0]
           + wy * wx * d[:, iy1][:, :, ix1])

    def vjp(g):
        dx = np.zeros_like(d)
        yy0 = np.broadcast_to(iy0[:, None], g.shape[1:])
        yy1 = np.broadcast_to(iy1[:, None], g.shape[1:])
        xx0 = np.broadcast_to(ix0[None, :], g.shape[1:])
        xx1 = np.broadcast_to(ix1[None, :], g.shape[1:])
        for c in range(g.shape[0]):
            gc = g[c]
            np.add.at(dx[c], (yy0, xx0), gc * (1 - wy) * (1 - wx))
            np.add.at(dx[c], (yy0, xx1), gc * (1 - wy) * wx)
            np.add.at(dx[c], (yy1, xx0), gc * wy * (1 - wx))
            np.add.at(dx[c], (yy1, xx1), gc * wy * wx)
        return dx

    return _make(out, [(x, vjp)])


# --- sparse voxel helpers ------------------------------------------------------

def neighbor_mean(x: Tensor, neighbor_rows: np.ndarray, neighbor_cols: np.ndarray,
                  inv_degree: np.ndarray) -> Tensor:
    """Row-normalized sparse aggregation: out[i] = mean of x over i's neighbors.

    The adjacency is passed as parallel (row, col) edge arrays plus 1/degree
    per row; rows with no neighbors produce zeros.
    """
    if x.data.ndim != 2:
        raise ShapeError("neighbor_mean", x.shape)
    out = np.zeros_like(x.data)
    if len(neighbor_rows):
        contrib = x.data[neighbor_cols] * inv_degree[neighbor_rows][:, None]
        np.add.at(out, neighbor_rows, contrib)

    def vjp(g):
        dx = np.zeros_like(x.data)
        if len(neighbor_rows):
            np.add.at(dx, neighbor_cols, g[neighbor_rows] * inv_degree[neighbor_rows][:, None])
        return dx

    return _make(out, [(x, vjp)])


def scatter_max_bev(x: Tensor, cell_of_row: np.ndarray, h: int, w: int) -> Tensor:
    """Max-pool voxel feature rows [N, C] into a BEV map [C, H, W].

    cell_of_row holds the flattened iy * W + ix cell per voxel row; empty
    cells stay exactly zero. Ties go to the lowest row index.
    """
    if x.data.ndim != 2:
        raise ShapeError("scatter_max_bev", x.shape)
    n, c = x.shape
    out = np.zeros((c, h * w))
    winner = np.full((c, h * w), -1, dtype=np.int64)
    order = np.argsort(cell_of_row, kind="stable")
    sorted_cells = cell_of_row[order]
    boundaries = np.nonzero(np.diff(sorted_cells))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    for s, e in zip(starts, ends):
        rows = order[s:e]
        cell = sorted_cells[s]
        sub = x.data[rows]                       # [k, C]
        am = sub.argmax(axis=0)                  # first max = lowest sorted row
        out[:, cell] = sub[am, np.arange(c)]
        winner[:, cell] = rows[am]

    def vjp(g):
        dx = np.zeros_like(x.data)
        gf = g.reshape(c, h * w)
        valid = winner >= 0
        chans = np.broadcast_to(np.arange(c)[:, None], winner.shape)
        np.add.at(dx, (winner[valid], chans[valid]), gf[valid])
        return dx

    return _make(out.reshape(c, h, w), [(x, vjp)])


# --- reverse pass ---------------------------------------------------------------

def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad tensor.

    The loss must be scalar; calling backward twice on the same graph
    root raises AutodiffError.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise AutodiffError("backward already ran on this graph; rebuild the graph")
    loss._backward_done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, vjp in node._edges:
            contrib = vjp(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


# --- optimizer -------------------------------------------------------------------

def cosine_lr(step: int, total: int, lr_max: float) -> float:
    """Cosine annealing from lr_max at step 0 to 0 at step == total."""
    if total <= 0:
        return lr_max
    frac = min(max(step, 0), total) / total
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * frac))


def sgd_step(params, grads, lr: float, momentum: float = 0.9,
             velocities=None):
    """One in-place SGD(+momentum) update; returns the velocity buffers."""
    if velocities is None:
        velocities = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            continue
        v *= momentum
        v += g
        p.data -= lr * v
    return velocities


class SGD:
    """SGD with momentum over a dict of named parameters.

    clip_norm > 0 rescales the global gradient norm before the update,
    which keeps occasional focal-loss spikes from destabilizing training.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocities = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        scale = 1.0
        if self.clip_norm > 0:
            sq = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    sq += float((p.grad * p.grad).sum())
            norm = math.sqrt(sq)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocities[k]
            v *= self.momentum
            v += scale * p.grad
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# --- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SMFW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]):
    """Write named f64 arrays: magic, version u32, count u32, then per entry
    name(u16 len + utf8), rank u8, dims u32 x rank, f64 values."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += pack_u32(CHECKPOINT_VERSION)
    blob += pack_u32(len(params))
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        enc = name.encode("utf-8")
        blob += pack_u16(len(enc)) + enc
        blob += bytes([arr.ndim])
        for d in arr.shape:
            blob += pack_u32(d)
        blob += pack_f64s(arr.ravel())
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    r = Reader(Path(path).read_bytes())
    r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")
    version = r.u32("checkpoint version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(r.offset - 4, f"unsupported checkpoint version {version}")
    count = r.u32("parameter count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        nlen = r.u16(f"name length of parameter {i}")
        name = r.take(nlen, f"name of parameter {i}").decode("utf-8", errors="replace")
        rank = r.take(1, f"rank of {name}")[0]
        dims = [r.u32(f"dim {d} of {name}") for d in range(rank)]
        n = 1
        for d in dims:
            n *= d
        if 8 * n > r.remaining():
            raise FormatError(r.offset, f"values of {name} need {8 * n} bytes, "
                                        f"only {r.remaining()} left")
        out[name] = r.f64s(n, f"values of {name}").reshape(dims)
    r.expect_eof("checkpoint")
    return out
