"""Minimal reverse-mode automatic differentiation on a linear tape.

Tensors are thin wrappers around numpy arrays.  Every operation appends the
result tensor to the active tape together with a closure that propagates the
output gradient to the operands.  A single reverse sweep over the tape
therefore visits each operation exactly once, in reverse topological order.

Convolutions use cross-correlation semantics (no kernel flip) and are routed
through im2col + GEMM so the heavy lifting stays inside BLAS.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class MissingGradientError(AutodiffError):
    pass


class CheckpointFormatError(AutodiffError):
    pass


class Tape:
    """Ordered record of one forward computation."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def release(self) -> None:
        """Break tensor<->tape reference cycles so the graph is freed by
        reference counting instead of waiting for a full gc pass (the arrays
        held by backward closures are large)."""
        for node in self.nodes:
            node.tape = None
            node._parents = ()
            node._backward = None
            node.grad = None
        self.nodes.clear()


class Tensor:
    __slots__ = ("data", "grad", "tape", "_parents", "_backward")

    def __init__(self, data, tape: Tape | None = None, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._parents = parents
        self._backward = backward
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor with Adam state and a freeze flag."""

    __slots__ = ("name", "m", "v", "t", "frozen")

    def __init__(self, data, name: str):
        super().__init__(np.asarray(data))
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0
        self.frozen = False


def _accum(t: Tensor, g: np.ndarray) -> None:
    if isinstance(t, Parameter) and t.frozen:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _frozen(t: Tensor) -> bool:
    return isinstance(t, Parameter) and t.frozen


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(x) into .grad of every tensor on the tape."""
    if root.data.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {root.shape}")
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, a.tape, (a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, a.tape, (a,))
    out._backward = lambda g: _accum(a, g * c)
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), a.tape, (a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.tape, (a,))
    out._backward = lambda g: _accum(a, g.reshape(a.shape))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), a.tape, (a,))
    out._backward = lambda g: _accum(a, g * (a.data > 0))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    out = Tensor(y, a.tape, (a,))
    out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(xs: np.ndarray, k: int) -> np.ndarray:
    """Single sample [C,X,Y,Z] -> columns [C*k^3, P] (K-major layout)."""
    c, sx, sy, sz = xs.shape
    xo, yo, zo = sx - k + 1, sy - k + 1, sz - k + 1
    cols = np.empty((c, k, k, k, xo, yo, zo), dtype=xs.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xs[:, i:i + xo, j:j + yo, l:l + zo]
    return cols.reshape(c * k ** 3, xo * yo * zo)


def _col2im(dcols: np.ndarray, xshape, k: int) -> np.ndarray:
    """Scatter-add column gradients back onto one (padded) input sample."""
    c, sx, sy, sz = xshape
    xo, yo, zo = sx - k + 1, sy - k + 1, sz - k + 1
    d = dcols.reshape(c, k, k, k, xo, yo, zo)
    gx = np.zeros(xshape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, i:i + xo, j:j + yo, l:l + zo] += d[:, i, j, l]
    return gx


def _im2col_batch(xp: np.ndarray, k: int) -> np.ndarray:
    """Whole batch [N,C,X,Y,Z] -> columns [C*k^3, N*P]."""
    n, c, sx, sy, sz = xp.shape
    xo, yo, zo = sx - k + 1, sy - k + 1, sz - k + 1
    cols = np.empty((c, k, k, k, n, xo, yo, zo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xp[:, :, i:i + xo, j:j + yo, l:l + zo].transpose(1, 0, 2, 3, 4)
    return cols.reshape(c * k ** 3, n * xo * yo * zo)


def _col2im_batch(dcols: np.ndarray, xpshape, k: int) -> np.ndarray:
    """Scatter-add column gradients back onto the whole (padded) batch."""
    n, c, sx, sy, sz = xpshape
    xo, yo, zo = sx - k + 1, sy - k + 1, sz - k + 1
    d = dcols.reshape(c, k, k, k, n, xo, yo, zo)
    gx = np.zeros(xpshape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, :, i:i + xo, j:j + yo, l:l + zo] += d[:, i, j, l].transpose(1, 0, 2, 3, 4)
    return gx


# Column matrices at most this large are built for the whole batch at once
# (one big GEMM); larger ones go sample by sample to stay cache-resident.
_CONV_BATCH_COL_BYTES = 24 * 2 ** 20


def conv3d(x: Tensor, w: Tensor, b: Tensor, padding: str = "valid") -> Tensor:
    """3D cross-correlation, stride 1.

    x: [Cin,X,Y,Z] or [N,Cin,X,Y,Z]; w: [Cout,Cin,k,k,k]; b: [Cout].
    Samples are processed one at a time so the column matrices stay
    cache-resident; columns are re-packed in the backward pass rather than
    retained.
    """
    batched = x.data.ndim == 5
    xd = x.data if batched else x.data[None]
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.data.ndim != 5 or w.shape[2:] != (k, k, k):
        raise ShapeMismatchError(f"conv3d: kernel must be cubic, got {w.shape}")
    if xd.shape[1] != cin:
        raise ShapeMismatchError(f"conv3d: input channels {xd.shape[1]} != kernel Cin {cin}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatchError("conv3d: 'same' padding requires odd kernel size")
        p = k // 2
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    elif padding == "valid":
        if any(s < k for s in xd.shape[2:]):
            raise ShapeMismatchError(
                f"conv3d: kernel {k} larger than input {xd.shape[2:]} under valid padding")
        p = 0
        xp = xd
    else:
        raise ValueError(f"conv3d: unknown padding {padding!r}")

    n = xp.shape[0]
    osp = tuple(s - k + 1 for s in xp.shape[2:])
    npos = osp[0] * osp[1] * osp[2]
    wmat = w.data.reshape(cout, -1)
    bias = b.data[:, None]
    whole_batch = n * cin * k ** 3 * npos * xd.itemsize <= _CONV_BATCH_COL_BYTES
    if whole_batch:
        o2 = wmat @ _im2col_batch(xp, k)
        o2 += bias
        out = np.ascontiguousarray(
            o2.reshape(cout, n, *osp).transpose(1, 0, 2, 3, 4))
    else:
        out = np.empty((n, cout, *osp), dtype=xd.dtype)
        for s in range(n):
            o2 = wmat @ _im2col(xp[s], k)
            o2 += bias
            out[s] = o2.reshape(cout, *osp)
    res = Tensor(out if batched else out[0], x.tape, (x, w, b))

    def bwd(g):
        gd = g if batched else g[None]
        need_wgrad = not _frozen(w)
        wmat_t = np.ascontiguousarray(wmat.T.astype(gd.dtype, copy=False))
        if whole_batch:
            g2 = np.ascontiguousarray(
                gd.transpose(1, 0, 2, 3, 4)).reshape(cout, n * npos)
            cols = _im2col_batch(xp, k)
            gw = g2 @ cols.T if need_wgrad else None
            gxp = _col2im_batch(wmat_t @ g2, xp.shape, k)
        else:
            gw = np.zeros((cout, cin * k ** 3), dtype=gd.dtype) if need_wgrad else None
            gxp = np.empty(xp.shape, dtype=gd.dtype)
            for s in range(n):
                g2 = gd[s].reshape(cout, -1)
                if need_wgrad:
                    gw += g2 @ _im2col(xp[s], k).T
                gxp[s] = _col2im(wmat_t @ g2, xp.shape[1:], k)
        if need_wgrad:
            _accum(w, gw.reshape(w.shape))
        if not _frozen(b):
            _accum(b, gd.sum(axis=(0, 2, 3, 4)))
        if p:
            gxp = gxp[:, :, p:-p, p:-p, p:-p]
        _accum(x, gxp if batched else gxp[0])

    res._backward = bwd
    return res


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Exponential-moving-average channel statistics for inference mode."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
                stats: RunningStats, eps: float = BN_EPS,
                momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over [N,C,X,Y,Z].

    Train mode normalizes by batch statistics and updates `stats` in place;
    infer mode normalizes by `stats`.
    """
    if x.data.ndim != 5:
        raise ShapeMismatchError(f"batchnorm3d expects rank-5 input, got {x.shape}")
    ax = (0, 2, 3, 4)
    csh = (1, -1, 1, 1, 1)
    if mode == "train":
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
        if m < 2:
            raise ShapeMismatchError("batchnorm3d train mode needs >= 2 values per channel")
        mu = x.data.mean(axis=ax)
        var = x.data.var(axis=ax)
        stats.mean[...] = momentum * stats.mean + (1 - momentum) * mu
        stats.var[...] = momentum * stats.var + (1 - momentum) * var
    elif mode == "infer":
        mu = stats.mean
        var = stats.var
    else:
        raise ValueError(f"batchnorm3d: unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(csh)) * inv_std.reshape(csh)
    out = Tensor(gamma.data.reshape(csh) * xhat + beta.data.reshape(csh),
                 x.tape, (x, gamma, beta))

    def bwd(g):
        if not _frozen(gamma):
            _accum(gamma, (g * xhat).sum(axis=ax))
        if not _frozen(beta):
            _accum(beta, g.sum(axis=ax))
        dxhat = g * gamma.data.reshape(csh)
        if mode == "train":
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
            s1 = dxhat.sum(axis=ax).reshape(csh)
            s2 = (dxhat * xhat).sum(axis=ax).reshape(csh)
            gx = (dxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(csh)
        else:
            gx = dxhat * inv_std.reshape(csh)
        _accum(x, gx.astype(x.dtype, copy=False))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# pooling / dense


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2. Gradient goes to the first (lowest linear
    index) maximum within each window."""
    batched = x.data.ndim == 5
    xd = x.data if batched else x.data[None]
    n, c, sx, sy, sz = xd.shape
    if sx % 2 or sy % 2 or sz % 2:
        raise ShapeMismatchError(f"maxpool3d: spatial dims must be even, got {xd.shape[2:]}")
    r = xd.reshape(n, c, sx // 2, 2, sy // 2, 2, sz // 2, 2)
    r = r.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, sx // 2, sy // 2, sz // 2, 8)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    res = Tensor(out if batched else out[0], x.tape, (x,))

    def bwd(g):
        gd = g if batched else g[None]
        gr = np.zeros_like(r)
        np.put_along_axis(gr, idx[..., None], gd[..., None], axis=-1)
        gr = gr.reshape(n, c, sx // 2, sy // 2, sz // 2, 2, 2, 2)
        gr = gr.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(xd.shape)
        _accum(x, gr if batched else gr[0])

    res._backward = bwd
    return res


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map. x: [F] or [N,F]; w: [O,F]; b: [O]."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeMismatchError(f"dense: input {x.shape} vs weights {w.shape}")
    out = Tensor(x.data @ w.data.T + b.data, x.tape, (x, w, b))

    def bwd(g):
        g2 = g if g.ndim == 2 else g[None]
        x2 = x.data if x.data.ndim == 2 else x.data[None]
        if not _frozen(w):
            _accum(w, g2.T @ x2)
        if not _frozen(b):
            _accum(b, g2.sum(axis=0))
        _accum(x, (g2 @ w.data).reshape(x.shape))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, lr: float = 1e-6, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction; clears gradients afterward.

    Frozen parameters are skipped entirely.
    """
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient")
        p.t += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * p.grad * p.grad
        mhat = p.m / (1 - beta1 ** p.t)
        vhat = p.v / (1 - beta2 ** p.t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_err <= self.tol)


def grad_check(f, point: np.ndarray, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued `f` against central
    finite differences at `point` (evaluated in float64).

    `f` receives a leaf Tensor attached to a fresh tape and must return a
    scalar Tensor on the same tape.  For large points, `max_coords` randomly
    subsamples the coordinates to difference.
    """
    x0 = np.asarray(point, dtype=np.float64)
    tape = Tape()
    leaf = Tensor(x0.copy(), tape)
    out = f(leaf)
    backward(tape, out)
    ana = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    def value(x):
        return float(f(Tensor(x, Tape())).data)

    flat = x0.ravel()
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
        coords.sort()
    max_err = 0.0
    ana_flat = np.asarray(ana, dtype=np.float64).ravel()
    for i in coords:
        h = 1e-4 * max(1.0, abs(flat[i]))
        xp = x0.copy().ravel()
        xp[i] = flat[i] + h
        fp = value(xp.reshape(x0.shape))
        xp[i] = flat[i] - h
        fm = value(xp.reshape(x0.shape))
        num = (fp - fm) / (2 * h)
        err = abs(num - ana_flat[i]) / max(1.0, abs(num), abs(ana_flat[i]))
        max_err = max(max_err, err)
    return GradCheckReport(max_rel_err=max_err, n_checked=len(coords), tol=tol)


# ---------------------------------------------------------------------------
# checkpoint serialization (named float32 arrays, sorted by name)

CKPT_MAGIC = b"CKPT"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays in the CKPT container (float32 payload)."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = blob[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        arrays[name] = data.copy()
    return arrays
