"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy array plus the graph record needed for
backward traversal. Gradients accumulate into ``.grad`` (never overwrite), so
a leaf feeding two branches receives the sum of both contributions and
per-image losses can be backpropagated one at a time into shared parameters.

Broadcasting is deliberately restricted to scalar-tensor combinations;
same-shape operands are required everywhere else and mismatches raise at
construction time naming both shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tag", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._tag = "leaf"
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tag={self._tag}, requires_grad={self.requires_grad})"

    # Scalar sugar; full tensor ops live in module functions below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        """Reverse-topological traversal populating leaf gradients.

        The loss must be scalar. Re-running backward on the same output
        without re-running forward is an error.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already ran for this output; re-run forward first")
        self._done = True
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # first contribution: own a copy instead of zero-filling then adding
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, tag: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._tag = tag
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        out = _node(a.data + float(b), (a,), None, "add_scalar")
        out._backward = lambda g: _accum(a, g)
        return out
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -b)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        s = float(b)
        return _node(a.data * s, (a,), lambda g: _accum(a, g * s), "mul_scalar")
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: (N, C) + (C,). The lone broadcast allowed besides scalars."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for add_bias: {x.shape} vs {b.shape}")

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _node(x.data + b.data[None, :], (x, b), bwd, "add_bias")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return _node(out, (x,), lambda g: _accum(x, g * mask), "relu")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: _accum(x, g / x.data), "log")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _node(s, (x,), lambda g: _accum(x, g * s * (1.0 - s)), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _node(s, (x,), bwd, "softmax")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through unclipped entries."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: _accum(x, g * mask), "clip")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x**2 for |x| < 1, |x| - 0.5 otherwise."""
    x = as_tensor(x)
    ax = np.abs(x.data)
    inner = ax < 1.0
    out = np.where(inner, 0.5 * x.data * x.data, ax - 0.5)
    dgrad = np.where(inner, x.data, np.sign(x.data))
    return _node(out, (x,), lambda g: _accum(x, g * dgrad), "smooth_l1")


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        ge = g if axis is None or keepdims else np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(ge, x.shape).copy())

    return _node(out, (x,), bwd, "sum")


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: _accum(x, g.reshape(x.shape)), "reshape")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows (or slices along ``axis``); backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(x.grad, idx, g)
        else:
            gm = np.moveaxis(x.grad, axis, 0)
            np.add.at(gm, idx, np.moveaxis(g, axis, 0))

    return _node(out, (x,), bwd, "take")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        gm = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, np.moveaxis(gm[lo:hi], 0, axis))

    return _node(out, tuple(tensors), bwd, "concat")


def stop_gradient(x: Tensor) -> Tensor:
    """Detach from the graph: same values, no parents, no gradient flow."""
    return Tensor(as_tensor(x).data)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize to unit L2 norm along ``axis``; norms are clamped at eps."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (g - y * dot) / norm)

    return _node(y, (x,), bwd, "l2_normalize")


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (C*kh*kw, B*ho*wo) column matrix."""
    b, c = xp.shape[:2]
    s = xp.strides
    win = as_strided(
        xp,
        (c, kh, kw, b, ho, wo),
        (s[1], s[2], s[3], s[0], s[2] * stride, s[3] * stride),
    )
    return win.reshape(c * kh * kw, b * ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution of (B, C, H, W) with weights (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"shape mismatch for conv2d: {x.shape} vs {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    flat = w.data.reshape(o, -1) @ cols
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ValueError(f"shape mismatch for conv2d bias: {b.shape} vs ({o},)")
        flat += b.data[:, None]
    out = flat.reshape(o, bsz, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, w) if b is None else (x, w, b)
    needs_grad = any(p.requires_grad for p in parents)
    saved_cols = cols if needs_grad and w.requires_grad else None

    def bwd(g):
        gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if b is not None:
            _accum(b, gflat.sum(axis=1))
        if w.requires_grad:
            _accum(w, (gflat @ saved_cols.T).reshape(w.shape))
        if x.requires_grad:
            # One gemm into column space, then kh*kw strided accumulations.
            dcols = w.data.reshape(o, -1).T @ gflat
            dview = dcols.reshape(c, kh, kw, bsz, ho, wo)
            dxp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
            for di in range(kh):
                for dj in range(kw):
                    dxp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ] += dview[:, di, dj].transpose(1, 0, 2, 3)
            dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
            _accum(x, dx)

    return _node(out, parents, bwd, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first entry
    in (row-major) window order."""
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d requires even extents, got {x.shape}")
    ho, wo = h // 2, w // 2
    if not x.requires_grad:
        d = x.data.reshape(bsz, c, ho, 2, wo, 2)
        return Tensor(d.max(axis=(3, 5)))
    win = x.data.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        buf = np.zeros((bsz, c, ho, wo, 4))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        _accum(x, buf.reshape(bsz, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w))

    return _node(out, (x,), bwd, "max_pool2d")


def upsample2_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        bsz, c, h2, w2 = g.shape
        _accum(x, g.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _node(out, (x,), bwd, "upsample2_nearest")


def _bilinear_weights(coords: np.ndarray, extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped corner indices and fractional weight for 1D bilinear lookup."""
    c = np.clip(coords, 0.0, extent - 1.0)
    i0 = np.clip(np.floor(c).astype(np.intp), 0, max(extent - 2, 0))
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, c - i0


def bilinear_sample(fmap: Tensor, points: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at continuous (y, x) pixel-index points -> (C, N).

    Integer lattice points return the stored values exactly; coordinates
    outside the map clamp to the border. Gradients flow into the map through
    the four corner weights of each sample.
    """
    fmap = as_tensor(fmap)
    c, h, w = fmap.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    y0, y1, fy = _bilinear_weights(pts[:, 0], h)
    x0, x1, fx = _bilinear_weights(pts[:, 1], w)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    d = fmap.data
    out = (
        d[:, y0, x0] * w00 + d[:, y0, x1] * w01 + d[:, y1, x0] * w10 + d[:, y1, x1] * w11
    )

    def bwd(g):
        if not fmap.requires_grad:
            return
        if fmap.grad is None:
            fmap.grad = np.zeros_like(fmap.data)
        flat = fmap.grad.reshape(c, h * w)
        rows = np.arange(c)[:, None]
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(flat, (rows, (yy * w + xx)[None, :]), g * ww[None, :])

    return _node(out, (fmap,), bwd, "bilinear_sample")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    checked: int
    excluded: int
    passed: bool
    worst_coord: int = -1
    failures: list[tuple[int, float]] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max_rel_err={self.max_rel_err:.3e} "
            f"checked={self.checked} kink_excluded={self.excluded}"
        )


def gradient_check(
    f,
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "f",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    Coordinates where the two one-sided differences disagree (a derivative
    kink within eps of the evaluation point, e.g. relu or max-pool switches)
    are excluded from the comparison and counted in the report.
    """
    x = as_tensor(x)
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy().reshape(-1)
    x.zero_grad()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))

    x.requires_grad = False  # finite differences only need forward values
    f0 = float(f(x).data)
    max_rel = 0.0
    worst = -1
    excluded = 0
    failures: list[tuple[int, float]] = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        d_plus = (fp - f0) / eps
        d_minus = (f0 - fm) / eps
        if abs(d_plus - d_minus) > 1e-3 * max(abs(d_plus), abs(d_minus), 1.0):
            excluded += 1
            continue
        num = (fp - fm) / (2.0 * eps)
        rel = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-6)
        if rel > max_rel:
            max_rel, worst = rel, int(i)
        if rel > tol:
            failures.append((int(i), rel))
    x.requires_grad = True
    return GradCheckReport(
        name=name,
        max_rel_err=max_rel,
        checked=len(coords) - excluded,
        excluded=excluded,
        passed=not failures,
        worst_coord=worst,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Checkpoint format: ascii index header, then raw little-endian float64 blobs.


_MAGIC = b"ssldet-ckpt 1\n"


def save_checkpoint(path, params: dict[str, np.ndarray | Tensor]) -> None:
    """Write named arrays; entries are sorted by name so saves are canonical."""
    items = []
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        if " " in name:
            raise ValueError(f"checkpoint names may not contain spaces: {name!r}")
        items.append((name, np.ascontiguousarray(arr, dtype="<f8")))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"{len(items)}\n".encode())
        for name, arr in items:
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim}{' ' if dims else ''}{dims}\n".encode())
        for _, arr in items:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        count = int(fh.readline())
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            fields = fh.readline().decode().split()
            name, ndim = fields[0], int(fields[1])
            shape = tuple(int(v) for v in fields[2 : 2 + ndim])
            shapes.append((name, shape))
        out: dict[str, np.ndarray] = {}
        for name, shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * 8)
            if len(buf) != n * 8:
                raise ValueError(f"truncated checkpoint entry {name!r} in {path}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out
