"""Dense float64 tensors, a reverse-mode tape, and Hessian-vector products.

Everything is 64-bit and deterministic: the same inputs always produce the
same bits. The tape (`Graph`) is append-only, so append order doubles as
topological order for the backward sweep.
"""

import numpy as np

__all__ = [
    "Tensor", "Graph", "ParamVector", "ShapeError",
    "forward_op", "backward", "active_graph",
    "conv2d", "add", "sub", "mul_scalar", "relu", "pad_reflect",
    "tsum", "tmean", "tabs", "tsqrt", "square", "clamp",
    "flat_grad", "hvp",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


_ACTIVE = None


def active_graph():
    return _ACTIVE


class Tensor:
    """Dense n-d float64 array, optionally attached to a tape node.

    A Tensor without a node handle is a constant: it never receives a
    gradient and recording ops on it produces constants too.
    """

    __slots__ = ("data", "node_id", "graph")

    def __init__(self, data, node_id=None, graph=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={tuple(self.data.shape)}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "saved", "meta")

    def __init__(self, op, inputs, saved, meta):
        self.op = op
        self.inputs = inputs   # tuple of node ids; None marks a constant input
        self.saved = saved
        self.meta = meta


class Graph:
    """Append-only reverse-mode tape.

    Use as a context manager; ops executed inside record themselves when at
    least one input carries a node handle on this graph. backward() leaves
    the tape intact, so more ops can be appended and a second backward pass
    run on a fresh loss.
    """

    def __init__(self):
        self.nodes = []
        self.param_ids = []     # leaf handles registered through register_params
        self._param_key = None  # identity of the registered ParamVector

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("another graph is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def leaf(self, data):
        """Register a variable; only leaves can receive gradients."""
        arr = np.asarray(data, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), arr.shape, None))
        return Tensor(arr, node_id=len(self.nodes) - 1, graph=self)

    def register_params(self, pv):
        """Register every segment of a ParamVector as a leaf, in segment order.

        Returns the per-segment leaf tensors. A graph accepts exactly one
        parameter vector; repeat calls with the same object return the cached
        leaves so a model can be re-evaluated on the same tape.
        """
        if self._param_key is not None:
            if self._param_key[0] is pv:
                return self._param_key[1]
            raise RuntimeError("a different parameter vector is already registered on this graph")
        leaves = [self.leaf(pv.array(name)) for name, _, _ in pv.segments]
        self.param_ids = [t.node_id for t in leaves]
        self._param_key = (pv, leaves)
        return leaves

    def _record(self, op, inputs, out, saved, meta):
        ids = tuple(
            t.node_id if (t.node_id is not None and t.graph is self) else None
            for t in inputs
        )
        self.nodes.append(_Node(op, ids, saved, meta))
        return Tensor(out, node_id=len(self.nodes) - 1, graph=self)


# ---------------------------------------------------------------------------
# op implementations: forward returns (out, saved); backward returns a tuple
# of gradients aligned with the op's inputs.

def _reflect_adjoint(gp, pad):
    """Adjoint of np.pad(mode='reflect') on the last two axes."""
    if pad == 0:
        return gp
    h = gp.shape[-2] - 2 * pad
    w = gp.shape[-1] - 2 * pad
    rows = gp[..., pad:pad + h, :].copy()
    for u in range(pad):
        rows[..., pad - u, :] += gp[..., u, :]
        rows[..., h - 2 - u, :] += gp[..., pad + h + u, :]
    out = rows[..., :, pad:pad + w].copy()
    for u in range(pad):
        out[..., :, pad - u] += rows[..., :, u]
        out[..., :, w - 2 - u] += rows[..., :, pad + w + u]
    return out


def _reflect_adjoint_hwc(gp, pad):
    """Same fold for channels-last [b, h, w, c] buffers (axes 1 and 2)."""
    if pad == 0:
        return gp
    h = gp.shape[1] - 2 * pad
    w = gp.shape[2] - 2 * pad
    rows = gp[:, pad:pad + h].copy()
    for u in range(pad):
        rows[:, pad - u] += gp[:, u]
        rows[:, h - 2 - u] += gp[:, pad + h + u]
    out = rows[:, :, pad:pad + w].copy()
    for u in range(pad):
        out[:, :, pad - u] += rows[:, :, u]
        out[:, :, w - 2 - u] += rows[:, :, pad + w + u]
    return out


# conv2d runs channels-last internally: the im2col gather then reads
# contiguous channel runs, which is what makes float64 training affordable.

def _f_conv2d(x, w, b):
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects x[b,c,h,w], w[o,c,k,k], b[o]; got {x.shape}, {w.shape}, {b.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin or kh != kw or kh % 2 == 0 or b.shape[0] != cout:
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    pad = kh // 2
    if pad >= h or pad >= wd:
        raise ShapeError(f"conv2d spatial dims {h}x{wd} too small for kernel {kh} (reflect pad {pad})")
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    xp = np.pad(xl, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect") if pad else xl
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kh), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, kh * kh * cin)
    out = cols @ w.transpose(2, 3, 1, 0).reshape(kh * kh * cin, cout)
    out += b
    out = np.ascontiguousarray(out.reshape(bsz, h, wd, cout).transpose(0, 3, 1, 2))
    return out, (cols, w, x.shape, pad)


def _b_conv2d(saved, meta, gout, needs):
    cols, w, x_shape, pad = saved
    bsz, cin, h, wd = x_shape
    cout, _, k, _ = w.shape
    gl = np.ascontiguousarray(gout.transpose(0, 2, 3, 1))
    gmat = gl.reshape(bsz * h * wd, cout)
    gx = gw = gb = None
    if needs[2]:
        gb = gmat.sum(axis=0)
    if needs[1]:
        gw = np.ascontiguousarray(
            (cols.T @ gmat).reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
    if needs[0]:
        # grad wrt the padded input is the full convolution of gout with the
        # flipped kernel; the reflect fold then maps it back to the input.
        q = k - 1
        gp = np.pad(gl, ((0, 0), (q, q), (q, q), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
        cols2 = win.transpose(0, 1, 2, 4, 5, 3).reshape(
            bsz * (h + 2 * pad) * (wd + 2 * pad), k * k * cout)
        wf = np.ascontiguousarray(w.transpose(2, 3, 0, 1)[::-1, ::-1]).reshape(k * k * cout, cin)
        gxp = (cols2 @ wf).reshape(bsz, h + 2 * pad, wd + 2 * pad, cin)
        gx = np.ascontiguousarray(_reflect_adjoint_hwc(gxp, pad).transpose(0, 3, 1, 2))
    return gx, gw, gb


def _f_add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    return x + y, None


def _f_sub(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"sub shape mismatch: {x.shape} vs {y.shape}")
    return x - y, None


def _f_mul_scalar(x, meta):
    return x * meta["c"], None


def _f_relu(x):
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def _f_pad_reflect(x, meta):
    pad = meta["pad"]
    if x.ndim < 2:
        raise ShapeError(f"pad_reflect needs at least 2 dims, got shape {x.shape}")
    if pad >= x.shape[-1] or pad >= x.shape[-2]:
        raise ShapeError(f"pad_reflect pad {pad} too large for shape {x.shape}")
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, width, mode="reflect"), (x.shape, pad)


def _f_sum(x):
    return np.sum(x), x.shape


def _f_mean(x):
    return np.mean(x), x.shape


def _f_abs(x):
    # tie rule at zero: sign(0) = 0
    return np.abs(x), np.sign(x)


def _f_sqrt(x):
    out = np.sqrt(x)
    return out, out


def _f_square(x):
    return x * x, x


def _f_clamp(x, meta):
    lo, hi = meta["lo"], meta["hi"]
    return np.clip(x, lo, hi), (x >= lo) & (x <= hi)


_OPS = {
    "conv2d":      (3, lambda ins, meta: _f_conv2d(*ins),
                    _b_conv2d),
    "add":         (2, lambda ins, meta: _f_add(*ins),
                    lambda sv, meta, g, needs: (g, g)),
    "sub":         (2, lambda ins, meta: _f_sub(*ins),
                    lambda sv, meta, g, needs: (g, -g)),
    "mul_scalar":  (1, lambda ins, meta: _f_mul_scalar(ins[0], meta),
                    lambda sv, meta, g, needs: (g * meta["c"],)),
    "relu":        (1, lambda ins, meta: _f_relu(ins[0]),
                    lambda sv, meta, g, needs: (g * sv,)),
    "pad_reflect": (1, lambda ins, meta: _f_pad_reflect(ins[0], meta),
                    lambda sv, meta, g, needs: (_reflect_adjoint(g, sv[1]),)),
    "sum":         (1, lambda ins, meta: _f_sum(ins[0]),
                    lambda sv, meta, g, needs: (np.full(sv, g),)),
    "mean":        (1, lambda ins, meta: _f_mean(ins[0]),
                    lambda sv, meta, g, needs: (np.full(sv, g / float(np.prod(sv, dtype=np.float64) or 1.0)),)),
    "abs":         (1, lambda ins, meta: _f_abs(ins[0]),
                    lambda sv, meta, g, needs: (g * sv,)),
    "sqrt":        (1, lambda ins, meta: _f_sqrt(ins[0]),
                    lambda sv, meta, g, needs: (g * (0.5 / sv),)),
    "square":      (1, lambda ins, meta: _f_square(ins[0]),
                    lambda sv, meta, g, needs: (g * (2.0 * sv),)),
    "clamp":       (1, lambda ins, meta: _f_clamp(ins[0], meta),
                    lambda sv, meta, g, needs: (g * sv,)),
}


def forward_op(op, inputs, **meta):
    """Evaluate one op, recording it on the active graph when differentiable.

    The output joins the tape only if a graph is active and at least one
    input carries a node handle on that graph; otherwise it is a constant.
    """
    if op not in _OPS:
        raise ValueError(f"unknown op tag {op!r}")
    arity, fwd, _ = _OPS[op]
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    if len(tensors) != arity:
        raise ShapeError(f"{op} takes {arity} inputs, got {len(tensors)}")
    out, saved = fwd([t.data for t in tensors], meta)
    g = _ACTIVE
    if g is not None and any(t.node_id is not None and t.graph is g for t in tensors):
        return g._record(op, tensors, out, saved, meta)
    return Tensor(out)


def conv2d(x, w, b):
    return forward_op("conv2d", (x, w, b))


def add(x, y):
    return forward_op("add", (x, y))


def sub(x, y):
    return forward_op("sub", (x, y))


def mul_scalar(x, c):
    return forward_op("mul_scalar", (x,), c=float(c))


def relu(x):
    return forward_op("relu", (x,))


def pad_reflect(x, pad):
    return forward_op("pad_reflect", (x,), pad=int(pad))


def tsum(x):
    return forward_op("sum", (x,))


def tmean(x):
    return forward_op("mean", (x,))


def tabs(x):
    return forward_op("abs", (x,))


def tsqrt(x):
    return forward_op("sqrt", (x,))


def square(x):
    return forward_op("square", (x,))


def clamp(x, lo, hi):
    return forward_op("clamp", (x,), lo=float(lo), hi=float(hi))


def backward(graph, loss):
    """Reverse sweep from a scalar loss; returns {leaf handle: gradient Tensor}.

    Every leaf gets an entry (zeros when unreachable from the loss). The tape
    is left intact and reusable.
    """
    if not isinstance(loss, Tensor) or loss.graph is not graph or loss.node_id is None:
        raise ValueError("loss is not recorded on this graph")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {loss.node_id: np.ones(loss.data.shape)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.op == "leaf":
            continue
        _, _, bwd = _OPS[node.op]
        needs = tuple(i is not None for i in node.inputs)
        for in_id, gin in zip(node.inputs, bwd(node.saved, node.meta, g, needs)):
            if in_id is None or gin is None:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + gin
            else:
                grads[in_id] = gin
    out = {}
    for nid, node in enumerate(graph.nodes):
        if node.op == "leaf":
            out[nid] = Tensor(grads[nid]) if nid in grads else Tensor(np.zeros(node.saved))
    return out


# ---------------------------------------------------------------------------
# flat parameter vectors

class ParamVector:
    """Named, contiguous segments over one flat float64 buffer.

    The buffer is treated as immutable by the optimizers: updates construct a
    new ParamVector over fresh data.
    """

    __slots__ = ("segments", "data")

    def __init__(self, segments, data):
        self.segments = tuple((str(n), tuple(int(d) for d in s), int(o)) for n, s, o in segments)
        self.data = np.asarray(data, dtype=np.float64).ravel()
        off = 0
        for name, shape, start in self.segments:
            size = int(np.prod(shape)) if shape else 1
            if start != off:
                raise ValueError(f"segment {name!r} offset {start} != expected {off}")
            off += size
        if off != self.data.size:
            raise ValueError(f"segment sizes total {off} but data has {self.data.size} values")

    @classmethod
    def from_arrays(cls, named_arrays):
        """Flatten an ordered sequence of (name, array) into one vector."""
        segments, chunks, off = [], [], 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            segments.append((name, arr.shape, off))
            chunks.append(arr.ravel())
            off += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(segments, data)

    def __len__(self):
        return self.data.size

    def names(self):
        return [name for name, _, _ in self.segments]

    def array(self, name):
        """Reshaped copy of one segment."""
        for n, shape, off in self.segments:
            if n == name:
                size = int(np.prod(shape)) if shape else 1
                return self.data[off:off + size].reshape(shape).copy()
        raise KeyError(name)

    def unflatten(self):
        """Ordered name -> array mapping; from_arrays() of it round-trips."""
        return {name: self.array(name) for name, _, _ in self.segments}

    def with_data(self, data):
        """Same segment layout over new values."""
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.size != self.data.size:
            raise ValueError(f"length mismatch: {data.size} vs {self.data.size}")
        return ParamVector(self.segments, data)

    def copy(self):
        return ParamVector(self.segments, self.data.copy())

    def __repr__(self):
        return f"ParamVector({len(self.segments)} segments, {self.data.size} values)"


def flat_grad(loss_fn, theta):
    """Flat gradient of loss_fn at theta.

    loss_fn(theta) must return a scalar Tensor recorded on a graph whose
    parameters were registered through Graph.register_params, so gradients
    concatenate back in segment order.
    """
    loss = loss_fn(theta)
    g = loss.graph
    if g is None or not g.param_ids:
        raise ValueError("loss_fn did not register parameters on a graph")
    grads = backward(g, loss)
    return np.concatenate([grads[i].data.ravel() for i in g.param_ids])


def hvp(loss_fn, theta, v, method="finite_diff", radius=None):
    """Hessian-vector product H·v of a scalar objective at theta.

    finite_diff takes central differences of the exact reverse-mode gradient
    along v with radius 1e-4 / (|v| + 1e-12) unless overridden. brute_force
    assembles the whole Hessian from per-coordinate gradient differences and
    multiplies; it is a test oracle with O(P^2) gradient evaluations.
    """
    if len(v) != len(theta):
        raise ValueError(f"length mismatch: v has {len(v)}, theta has {len(theta)}")
    if method == "finite_diff":
        r = radius if radius is not None else 1e-4 / (float(np.linalg.norm(v.data)) + 1e-12)
        gp = flat_grad(loss_fn, theta.with_data(theta.data + r * v.data))
        gm = flat_grad(loss_fn, theta.with_data(theta.data - r * v.data))
        hv = (gp - gm) / (2.0 * r)
    elif method == "brute_force":
        p = len(theta)
        r = 1e-4 / (1.0 + 1e-12)
        hess = np.empty((p, p))
        for j in range(p):
            e = np.zeros(p)
            e[j] = r
            gp = flat_grad(loss_fn, theta.with_data(theta.data + e))
            gm = flat_grad(loss_fn, theta.with_data(theta.data - e))
            hess[:, j] = (gp - gm) / (2.0 * r)
        hv = hess @ v.data
    else:
        raise ValueError(f"unknown hvp method {method!r}")
    bad = np.flatnonzero(~np.isfinite(hv))
    if bad.size:
        raise FloatingPointError(f"non-finite hessian-vector product at index {int(bad[0])}")
    return theta.with_data(hv)
