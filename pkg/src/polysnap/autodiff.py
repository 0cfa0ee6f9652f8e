"""Reverse-mode automatic differentiation on numpy arrays.

Small engine providing exactly the differentiable primitives the feature
encoder, vertex sampler, deforming network and losses need.  Tensors wrap
dense numpy arrays; every primitive records its parents and a backward
closure, and :func:`backward` walks the recorded graph once in reverse
topological order.  Shapes must match exactly; the only broadcasting allowed
is scalar-vs-tensor (0-d tensors in ``add``/``sub``/``mul`` and python
floats in ``scale``).

Default precision is float32.  Gradient verification builds float64 graphs
(see :func:`gradient_check`).
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_debug_checks = False
_grad_disabled = 0


class ShapeError(ValueError):
    """Raised when operands of a primitive have incompatible shapes."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is called twice on the same recorded graph."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness checks (NaN/Inf raises FloatingPointError)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class no_grad:
    """Context manager that disables graph recording inside its scope."""

    def __enter__(self):
        global _grad_disabled
        _grad_disabled += 1
        return self

    def __exit__(self, *exc):
        global _grad_disabled
        _grad_disabled -= 1
        return False


class Tensor:
    """Dense numeric array with an optional gradient buffer.

    ``grad`` is populated by :func:`backward` for tensors created with
    ``requires_grad=True`` (parameters and loss-relevant inputs).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(name: str, out_data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by '{name}'")
    out = Tensor(out_data)
    if _grad_disabled == 0 and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _shape_guard(name: str, ok: bool, detail: str) -> None:
    if not ok:
        raise ShapeError(f"{name}: {detail}")


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _reduce_for(t: Tensor, g: np.ndarray) -> np.ndarray:
    # collapse gradient back to a 0-d operand
    if _is_scalar(t) and g.ndim > 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _shape_guard("add", a.shape == b.shape or _is_scalar(a) or _is_scalar(b),
                 f"operand shapes {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_for(a, g), _reduce_for(b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _shape_guard("sub", a.shape == b.shape or _is_scalar(a) or _is_scalar(b),
                 f"operand shapes {a.shape} vs {b.shape}")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_for(a, g), _reduce_for(b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _shape_guard("mul", a.shape == b.shape or _is_scalar(a) or _is_scalar(b),
                 f"operand shapes {a.shape} vs {b.shape}")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_reduce_for(a, g * b.data), _reduce_for(b, g * a.data)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def transpose(a: Tensor) -> Tensor:
    _shape_guard("transpose", a.data.ndim == 2, f"expected 2-d operand, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _shape_guard("matmul", a.data.ndim == 2 and b.data.ndim == 2,
                 f"expected 2-d operands, got {a.shape} and {b.shape}")
    _shape_guard("matmul", a.shape[1] == b.shape[0],
                 f"inner dims differ: {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: rows of x (N, d_in) through w (d_in, d_out) plus bias."""
    _shape_guard("linear", x.data.ndim == 2 and w.data.ndim == 2 and x.shape[1] == w.shape[0],
                 f"x {x.shape} incompatible with w {w.shape}")
    y = x.data @ w.data
    if b is not None:
        _shape_guard("linear", b.shape == (w.shape[1],),
                     f"bias {b.shape} incompatible with w {w.shape}")
        y = y + b.data
        return _record("linear", y, (x, w, b),
                       lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))
    return _record("linear", y, (x, w),
                   lambda g: (g @ w.data.T, x.data.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _record("softmax", y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    _shape_guard("layer_norm", gamma.shape == (d,) and beta.shape == (d,),
                 f"gamma/beta {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd

    def bwd(g):
        dxhat = g * gamma.data
        dx = istd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.data.ndim - 1))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution / resampling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False)
    return view.reshape(c * kh * kw, ho * wo).copy(), ho, wo


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    cout, cin, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise convolution: plain channel mixing, no patch extraction
        c, h, ww = x.shape
        cols = x.reshape(c, h * ww)
        return (w.reshape(cout, cin) @ cols).reshape(cout, h, ww), cols
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    y = (w.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    return y, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution on a single (C, H, W) image, zero padding."""
    _shape_guard("conv2d", x.data.ndim == 3 and w.data.ndim == 4,
                 f"x {x.shape}, w {w.shape}")
    _shape_guard("conv2d", x.shape[0] == w.shape[1],
                 f"input channels {x.shape[0]} vs kernel {w.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    cout, cin, kh, kw = w.shape
    _, h, ww_in = x.shape
    y, cols = _conv_fwd(x.data, w.data, stride, padding)
    if b is not None:
        _shape_guard("conv2d", b.shape == (cout,), f"bias {b.shape} vs {cout} output channels")
        y = y + b.data[:, None, None]

    def bwd(g):
        ho, wo = g.shape[1], g.shape[2]
        gm = g.reshape(cout, -1)
        dw = (gm @ cols.T).reshape(w.data.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                dx = (w.data.reshape(cout, cin).T @ gm).reshape(x.data.shape)
            else:
                # input gradient as a stride-1 convolution of the zero-dilated
                # output gradient with the flipped kernel (transposed conv)
                if stride > 1:
                    gd = np.zeros((cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                                  dtype=g.dtype)
                    gd[:, ::stride, ::stride] = g
                else:
                    gd = g
                extra_h = (h + 2 * padding - kh) % stride
                extra_w = (ww_in + 2 * padding - kw) % stride
                pl = kh - 1 - padding
                pt = kw - 1 - padding
                gp = np.pad(gd, ((0, 0), (pl, pl + extra_h), (pt, pt + extra_w)))
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                dx, _ = _conv_fwd(gp, np.ascontiguousarray(wflip), 1, 0)
        if b is not None:
            return (dx, dw, g.sum(axis=(1, 2)))
        return (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return _record("conv2d", y, parents, bwd)


_interp_cache: dict[tuple[int, int, str], np.ndarray] = {}


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """1-d linear interpolation matrix, half-pixel-center convention."""
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _interp_cache.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in), dtype=dtype)
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.minimum(src.astype(np.int64), max(n_in - 2, 0))
        t = src - i0
        i1 = np.minimum(i0 + 1, n_in - 1)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, i0), (1.0 - t).astype(dtype))
        np.add.at(mat, (rows, i1), t.astype(dtype))
        _interp_cache[key] = mat
    return mat


def bilinear_upsample(x: Tensor, out_hw: tuple[int, int] | None = None,
                      factor: int | None = None) -> Tensor:
    """Bilinear resize of a (C, H, W) map to a target size (or by a factor)."""
    _shape_guard("bilinear_upsample", x.data.ndim == 3, f"expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if out_hw is None:
        if factor is None:
            raise ValueError("bilinear_upsample: either out_hw or factor is required")
        out_hw = (h * factor, w * factor)
    ho, wo = out_hw
    ah = _interp_matrix(h, ho, x.dtype)
    aw = _interp_matrix(w, wo, x.dtype)
    # separable resize: rows then columns, both as BLAS products
    t = np.tensordot(ah, x.data, axes=(1, 1))          # (Ho, C, W)
    y = np.tensordot(t, aw, axes=(2, 1)).transpose(1, 0, 2)  # (C, Ho, Wo)

    def bwd(g):
        tg = np.tensordot(ah.T, g, axes=(1, 1))        # (H, C, Wo)
        return (np.tensordot(tg, aw, axes=(2, 0)).transpose(1, 0, 2),)

    return _record("bilinear_upsample", np.ascontiguousarray(y), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _shape_guard("concat", len(tensors) >= 1, "no operands")
    base = tensors[0].shape
    for t in tensors[1:]:
        same = tuple(s for i, s in enumerate(t.shape) if i != axis % len(base))
        ref = tuple(s for i, s in enumerate(base) if i != axis % len(base))
        _shape_guard("concat", same == ref, f"shapes {base} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), bwd)


def grid_sample(img: Tensor, coords: Tensor) -> Tensor:
    """Bilinear point samples of a (C, H, W) map at (N, 2) xy coordinates.

    Coordinates live in the continuous pixel frame where cell (i, j) has its
    center at (x, y) = (j + 0.5, i + 0.5).  Out-of-bounds points clamp to the
    border; clamped coordinates receive zero coordinate-gradient.
    """
    _shape_guard("grid_sample", img.data.ndim == 3 and coords.data.ndim == 2
                 and coords.shape[1] == 2, f"img {img.shape}, coords {coords.shape}")
    c, h, w = img.shape
    x = coords.data[:, 0] - 0.5
    y = coords.data[:, 1] - 0.5
    open_x = (x > 0.0) & (x < w - 1.0)
    open_y = (y > 0.0) & (y < h - 1.0)
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    j0 = np.minimum(x.astype(np.int64), max(w - 2, 0))
    i0 = np.minimum(y.astype(np.int64), max(h - 2, 0))
    tx = x - j0
    ty = y - i0
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    v00 = img.data[:, i0, j0]  # (C, N)
    v01 = img.data[:, i0, j1]
    v10 = img.data[:, i1, j0]
    v11 = img.data[:, i1, j1]
    out = ((1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11)).T

    def bwd(g):
        gt = g.T  # (C, N)
        dimg = None
        if img.requires_grad:
            dimg = np.zeros_like(img.data)
            np.add.at(dimg, (slice(None), i0, j0), gt * ((1 - ty) * (1 - tx)))
            np.add.at(dimg, (slice(None), i0, j1), gt * ((1 - ty) * tx))
            np.add.at(dimg, (slice(None), i1, j0), gt * (ty * (1 - tx)))
            np.add.at(dimg, (slice(None), i1, j1), gt * (ty * tx))
        dcoords = None
        if coords.requires_grad:
            dvdx = (1 - ty) * (v01 - v00) + ty * (v11 - v10)
            dvdy = (1 - tx) * (v10 - v00) + tx * (v11 - v01)
            dcoords = np.stack([
                (gt * dvdx).sum(axis=0) * open_x,
                (gt * dvdy).sum(axis=0) * open_y,
            ], axis=1)
        return (dimg, dcoords)

    return _record("grid_sample", out, (img, coords), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of x by integer index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    _shape_guard("gather_rows", idx.ndim == 1, f"index must be 1-d, got {idx.shape}")

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _record("gather_rows", x.data[idx], (x,), bwd)


# ---------------------------------------------------------------------------
# reductions / scalar math


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False),))
    ax = axis % x.data.ndim

    def bwd(g):
        return (np.repeat(np.expand_dims(g, ax), x.data.shape[ax], axis=ax),)

    return _record("sum", x.data.sum(axis=ax), (x,), bwd)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis % x.data.ndim]
    return scale(tsum(x, axis=axis), 1.0 / n)


def sqrt_eps(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Numerically-stabilized square root: sqrt(x + eps)."""
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data + eps)
    return _record("sqrt_eps", y, (x,), lambda g: (g * (0.5 / y),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _record("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def op_suite() -> dict[str, Callable]:
    """The full set of differentiable primitives this engine provides."""
    return {
        "add": add, "sub": sub, "mul": mul, "scale": scale, "transpose": transpose,
        "matmul": matmul, "linear": linear, "relu": relu, "softmax": softmax,
        "layer_norm": layer_norm, "conv2d": conv2d,
        "bilinear_upsample": bilinear_upsample, "concat": concat,
        "grid_sample": grid_sample, "gather_rows": gather_rows,
        "sum": tsum, "mean": tmean, "sqrt_eps": sqrt_eps, "clamp": clamp,
    }


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    `params`, when given, are additionally zero-filled if the graph never
    reached them.  A recorded graph can be walked once; a second call raises
    GraphConsumedError.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph; rebuild the forward pass")
    loss._consumed = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            # leaf: accumulate into the public buffer
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def gradient_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-5, max_coords: int = 24,
                   rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of f(params) against central differences.

    All parameters must be float64.  Returns the maximum relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over sampled
    coordinates of every parameter.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient_check requires float64 parameters")
        p.zero_grad()
    out = f(params)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ValueError("gradient_check: f must return a scalar Tensor")
    backward(out, params=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = f(params).item()
            flat[c] = orig - eps
            lo = f(params).item()
            flat[c] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(an.reshape(-1)[c])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# named-tensor archive (checkpoint container)

_ARCHIVE_MAGIC = b"PSTC1\x00"


def save_tensor_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write named arrays plus a JSON manifest as one flat binary container.

    Layout: magic, u64-LE header length, canonical-JSON header, then raw
    little-endian array payloads at the offsets the header declares.
    """
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.dtype.newbyteorder("<")
        buf = arr.astype(le, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": le.str,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(buf),
        })
        payload.extend(buf)
    header = json.dumps({"manifest": manifest, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_tensor_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_ARCHIVE_MAGIC))
        if magic != _ARCHIVE_MAGIC:
            raise ValueError(f"{path}: not a tensor archive")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["manifest"]
