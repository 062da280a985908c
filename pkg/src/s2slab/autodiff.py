"""Reverse-mode automatic differentiation on an explicit, single-use tape.

Tensors hold contiguous row-major float32 buffers (float64 is preserved when
handed in, which the finite-difference oracles rely on). Ops executed while a
Tape is active append nodes in execution order; Tape.backward walks the nodes
once in reverse and populates .grad on every requires_grad tensor it saw.
Without an active tape the same ops run as plain array code.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TapeError(RuntimeError):
    """Misuse of the tape: consumed twice, foreign loss, non-scalar loss."""


_STACK: list["Tape"] = []

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based generator (Philox4x64) keyed by a tuple of integers.

    Pure integer folding keeps the stream identical across platforms; the
    global numpy RNG is never touched.
    """
    k = 0
    for part in key:
        k = ((k ^ (int(part) & _MASK64)) * _GOLDEN + 1) & _MASK64
        k ^= k >> 31
    return np.random.Generator(np.random.Philox(key=k))


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _as_array(data, dtype=None) -> np.ndarray:
    a = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if a.dtype == np.float64 else np.float32
    if a.ndim == 0:
        return np.asarray(a, dtype=dtype)  # ascontiguousarray would force 1-d
    return np.ascontiguousarray(a, dtype=dtype)


class Tensor:
    """Shape + flat float buffer + grad slot. Data is always C-contiguous."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """A named tensor owned by a model; frozen parameters skip updates."""

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, data, frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = bool(frozen)

    def __repr__(self):
        froz = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.shape}{froz})"


class _Node:
    __slots__ = ("kind", "inputs", "output", "ctx")

    def __init__(self, kind, inputs, output, ctx):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Ordered op recording; topological by construction, consumed by backward."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.pop()

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
        """Seed d(loss)=1 and run every recorded VJP once, newest first.

        With wrt given, only gradients flowing into those tensors are
        computed; otherwise every requires_grad tensor on the tape gets a
        grad (zeros when it never reached the loss).
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        if id(loss) not in self._produced:
            raise TapeError("loss tensor was not produced on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True

        if wrt is None:
            targets = None
            relevant = None
        else:
            targets = {id(t): t for t in wrt}
            relevant = set(targets)
            for node in self.nodes:
                if any(id(t) in relevant for t in node.inputs):
                    relevant.add(id(node.output))

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)
            if out_grad is None:
                continue
            needed = tuple(
                (t.requires_grad if relevant is None else id(t) in relevant)
                for t in node.inputs
            )
            if not any(needed):
                continue
            input_grads = _BACKWARD[node.kind](node.ctx, out_grad, needed)
            for t, g in zip(node.inputs, input_grads):
                if g is None:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = g if g.flags["OWNDATA"] else g.copy()
                else:
                    acc += g

        if targets is None:
            seen: set[int] = set()
            for node in self.nodes:
                for t in node.inputs + (node.output,):
                    if t.requires_grad and id(t) not in seen:
                        seen.add(id(t))
                        t.grad = grads.get(id(t), np.zeros_like(t.data))
        else:
            for tid, t in targets.items():
                t.grad = grads.get(tid, np.zeros_like(t.data))


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, ctx: dict) -> Tensor:
    out = Tensor(out_data)
    if _STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _STACK[-1]
        tape.nodes.append(_Node(kind, tuple(inputs), out, ctx))
        tape._produced.add(id(out))
    elif _STACK:
        # keep pure bookkeeping ops reachable as losses even without grads
        tape = _STACK[-1]
        tape._produced.add(id(out))
    return out


# ---------------------------------------------------------------------------
# op implementations: forward computes, backward returns per-input VJPs
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution, weights laid out (out, in, kh, kw)."""
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError("conv2d kernel larger than padded input")
    if b.shape != (oc,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({oc},)")

    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    out = cols @ w.data.reshape(oc, -1).T + b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    ctx = {
        "cols": cols,
        "w": w.data,
        "stride": stride,
        "padding": padding,
        "x_shape": x.shape,
        "k": (kh, kw),
        "o": (oh, ow),
    }
    return _record("conv2d", (x, w, b), out, ctx)


def _conv2d_bwd(ctx, dout, needed):
    n, c, h, wd = ctx["x_shape"]
    kh, kw = ctx["k"]
    oh, ow = ctx["o"]
    s, p = ctx["stride"], ctx["padding"]
    w = ctx["w"]
    oc = w.shape[0]
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)

    dx = dw = db = None
    if needed[0]:
        dcols = dmat @ w.reshape(oc, -1)
        dcols = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u : u + s * oh : s, v : v + s * ow : s] += dcols[:, :, :, :, u, v]
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        dx = np.ascontiguousarray(dx)
    if needed[1]:
        dw = (dmat.T @ ctx["cols"]).reshape(w.shape)
    if needed[2]:
        db = dmat.sum(axis=0)
    return dx, dw, db


def maxpool2d(x: Tensor, kernel: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling; returns flat spatial argmax indices.

    Ties go to the first element in row-major window scan order. Trailing
    rows/cols that do not fill a window are cropped.
    """
    if kernel < 1:
        raise ValueError(f"maxpool2d kernel must be >= 1, got {kernel}")
    n, c, h, w = x.shape
    oh, ow = h // kernel, w // kernel
    if oh == 0 or ow == 0:
        raise ValueError(f"maxpool2d window {kernel} does not fit input {h}x{w}")
    xc = x.data[:, :, : oh * kernel, : ow * kernel]
    win = (
        xc.reshape(n, c, oh, kernel, ow, kernel)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, kernel * kernel)
    )
    flat_in_window = win.argmax(axis=-1)
    out = np.take_along_axis(win, flat_in_window[..., None], axis=-1)[..., 0]
    rows = (np.arange(oh)[:, None] * kernel) + (flat_in_window // kernel)
    cols = (np.arange(ow)[None, :] * kernel) + (flat_in_window % kernel)
    idx = rows * w + cols
    ctx = {"idx": idx, "in_hw": (h, w), "out": None}
    t = _record("maxpool2d", (x,), np.ascontiguousarray(out), ctx)
    return t, idx


def _maxpool2d_bwd(ctx, dout, needed):
    if not needed[0]:
        return (None,)
    h, w = ctx["in_hw"]
    idx = ctx["idx"]
    n, c = idx.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    np.put_along_axis(dx, idx.reshape(n, c, -1), dout.reshape(n, c, -1), axis=2)
    return (dx.reshape(n, c, h, w),)


def maxunpool2d(y: Tensor, indices: np.ndarray, output_hw: tuple[int, int]) -> Tensor:
    """Scatter pooled values back to their argmax positions, zeros elsewhere."""
    n, c, oh, ow = y.shape
    if indices.shape != (n, c, oh, ow):
        raise ValueError(f"maxunpool2d indices shape {indices.shape} != {y.shape}")
    h, w = output_hw
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise ValueError("maxunpool2d indices out of range for output size")
    out = np.zeros((n, c, h * w), dtype=y.dtype)
    np.put_along_axis(out, indices.reshape(n, c, -1), y.data.reshape(n, c, -1), axis=2)
    ctx = {"idx": indices, "y_shape": y.shape}
    return _record("maxunpool2d", (y,), out.reshape(n, c, h, w), ctx)


def _maxunpool2d_bwd(ctx, dout, needed):
    if not needed[0]:
        return (None,)
    idx = ctx["idx"]
    n, c, oh, ow = ctx["y_shape"]
    dy = np.take_along_axis(dout.reshape(n, c, -1), idx.reshape(n, c, -1), axis=2)
    return (dy.reshape(n, c, oh, ow),)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"dense expects 2-d input, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} @ weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data
    return _record("dense", (x, w, b), out, {"x": x.data, "w": w.data})


def _dense_bwd(ctx, dout, needed):
    dx = dout @ ctx["w"].T if needed[0] else None
    dw = ctx["x"].T @ dout if needed[1] else None
    db = dout.sum(axis=0) if needed[2] else None
    return dx, dw, db


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record("relu", (x,), out, {"mask": x.data > 0})


def _relu_bwd(ctx, dout, needed):
    return (dout * ctx["mask"],) if needed[0] else (None,)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record("add", (a, b), a.data + b.data, {})


def _add_bwd(ctx, dout, needed):
    return (dout if needed[0] else None, dout if needed[1] else None)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data, {})


def _sub_bwd(ctx, dout, needed):
    return (dout if needed[0] else None, -dout if needed[1] else None)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _record("mul", (a, b), a.data * b.data, {"a": a.data, "b": b.data})


def _mul_bwd(ctx, dout, needed):
    da = dout * ctx["b"] if needed[0] else None
    db = dout * ctx["a"] if needed[1] else None
    return da, db


def scale(x: Tensor, s: float) -> Tensor:
    sv = x.data.dtype.type(s)
    return _record("scale", (x,), x.data * sv, {"s": sv})


def _scale_bwd(ctx, dout, needed):
    return (dout * ctx["s"],) if needed[0] else (None,)


def sign(x: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0; gradient is identically zero."""
    return _record("sign", (x,), np.sign(x.data), {})


def _sign_bwd(ctx, dout, needed):
    return (np.zeros_like(dout),) if needed[0] else (None,)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through inside the bounds."""
    if lo > hi:
        raise ValueError(f"clip bounds reversed: {lo} > {hi}")
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _record("clip", (x,), out, {"mask": mask})


def _clip_bwd(ctx, dout, needed):
    return (dout * ctx["mask"],) if needed[0] else (None,)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, {"out": out})


def _tanh_bwd(ctx, dout, needed):
    return (dout * (1.0 - ctx["out"] * ctx["out"]),) if needed[0] else (None,)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _record("reshape", (x,), np.ascontiguousarray(out), {"shape": x.shape})


def _reshape_bwd(ctx, dout, needed):
    return (dout.reshape(ctx["shape"]),) if needed[0] else (None,)


def tsum(x: Tensor) -> Tensor:
    return _record("tsum", (x,), np.asarray(x.data.sum(dtype=x.dtype)), {"shape": x.shape})


def _tsum_bwd(ctx, dout, needed):
    return (np.broadcast_to(dout, ctx["shape"]).copy(),) if needed[0] else (None,)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean NLL of softmax(logits) against integer labels; fused and stable."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects 2-d logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label out of range for logit width")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    loss = np.asarray((lse - z[np.arange(n), labels]).mean(), dtype=z.dtype)
    return _record("softmax_cross_entropy", (logits,), loss, {"probs": probs, "labels": labels})


def _softmax_cross_entropy_bwd(ctx, dout, needed):
    if not needed[0]:
        return (None,)
    probs, labels = ctx["probs"], ctx["labels"]
    n = probs.shape[0]
    dz = probs.copy()
    dz[np.arange(n), labels] -= 1.0
    return (dz * (dout / n),)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    loss = np.asarray(np.mean(diff * diff), dtype=diff.dtype)
    return _record("mse", (pred, target), loss, {"diff": diff})


def _mse_bwd(ctx, dout, needed):
    diff = ctx["diff"]
    g = dout * (2.0 / diff.size) * diff
    return (g if needed[0] else None, -g if needed[1] else None)


def margin_loss(logits: Tensor, labels: np.ndarray, kappa: float = 0.0) -> Tensor:
    """Sum over the batch of max(z_true - max_other, -kappa).

    Driving this down pushes the true logit below the strongest competitor;
    the untargeted attack objective.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if k < 2:
        raise ValueError("margin_loss needs at least two classes")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    z = logits.data
    rows = np.arange(n)
    z_true = z[rows, labels]
    masked = z.copy()
    masked[rows, labels] = -np.inf
    other_idx = masked.argmax(axis=1)
    margins = z_true - masked[rows, other_idx]
    active = margins > -kappa
    loss = np.asarray(np.where(active, margins, -kappa).sum(), dtype=z.dtype)
    ctx = {"labels": labels, "other": other_idx, "active": active, "k": k}
    return _record("margin_loss", (logits,), loss, ctx)


def _margin_loss_bwd(ctx, dout, needed):
    if not needed[0]:
        return (None,)
    labels, other, active = ctx["labels"], ctx["other"], ctx["active"]
    n = labels.shape[0]
    dz = np.zeros((n, ctx["k"]), dtype=dout.dtype)
    rows = np.arange(n)[active]
    dz[rows, labels[active]] = dout
    dz[rows, other[active]] -= dout
    return (dz,)


_BACKWARD = {
    "conv2d": _conv2d_bwd,
    "maxpool2d": _maxpool2d_bwd,
    "maxunpool2d": _maxunpool2d_bwd,
    "dense": _dense_bwd,
    "relu": _relu_bwd,
    "add": _add_bwd,
    "sub": _sub_bwd,
    "mul": _mul_bwd,
    "scale": _scale_bwd,
    "sign": _sign_bwd,
    "clip": _clip_bwd,
    "tanh": _tanh_bwd,
    "reshape": _reshape_bwd,
    "tsum": _tsum_bwd,
    "softmax_cross_entropy": _softmax_cross_entropy_bwd,
    "mse": _mse_bwd,
    "margin_loss": _margin_loss_bwd,
}

_FORWARD = {
    "conv2d": lambda ins, ctx: conv2d(
        *ins, stride=ctx.get("stride", 1), padding=ctx.get("padding", 0)
    ),
    "maxpool2d": lambda ins, ctx: maxpool2d(ins[0], ctx.get("kernel", 2))[0],
    "maxunpool2d": lambda ins, ctx: maxunpool2d(ins[0], ctx["indices"], ctx["output_hw"]),
    "dense": lambda ins, ctx: dense(*ins),
    "relu": lambda ins, ctx: relu(ins[0]),
    "add": lambda ins, ctx: add(*ins),
    "sub": lambda ins, ctx: sub(*ins),
    "mul": lambda ins, ctx: mul(*ins),
    "scale": lambda ins, ctx: scale(ins[0], ctx["s"]),
    "sign": lambda ins, ctx: sign(ins[0]),
    "clip": lambda ins, ctx: clip(ins[0], ctx["lo"], ctx["hi"]),
    "tanh": lambda ins, ctx: tanh(ins[0]),
    "reshape": lambda ins, ctx: reshape(ins[0], ctx["shape"]),
    "tsum": lambda ins, ctx: tsum(ins[0]),
    "softmax_cross_entropy": lambda ins, ctx: softmax_cross_entropy(ins[0], ctx["labels"]),
    "mse": lambda ins, ctx: mse(*ins),
    "margin_loss": lambda ins, ctx: margin_loss(ins[0], ctx["labels"], ctx.get("kappa", 0.0)),
}


def forward(kind: str, inputs: Sequence[Tensor], ctx: dict | None = None) -> Tensor:
    """Uniform dispatch: run the op named `kind` on `inputs` with params `ctx`."""
    fn = _FORWARD.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}")
    return fn(list(inputs), ctx or {})


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

_GRAD_CHECK_LIMIT = 10_000


def grad_check(
    model,
    x: Tensor,
    loss_kind: str,
    labels: np.ndarray | None = None,
    h: float = 1e-3,
    max_coords_per_tensor: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Checks every non-frozen parameter (and x itself when it requires grad) on
    a sample of coordinates. The model must stay under 10^4 parameters; the
    differencing runs in float64.
    """
    params = [p for p in model.parameters() if not p.frozen]
    total = sum(p.size for p in params)
    if total > _GRAD_CHECK_LIMIT:
        raise ValueError(f"grad_check supports <= {_GRAD_CHECK_LIMIT} parameters, got {total}")
    if loss_kind not in ("cross-entropy", "mse"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "cross-entropy" and labels is None:
        labels = np.zeros(x.shape[0], dtype=np.int64)

    def compute_loss():
        out = model.forward(x)
        if loss_kind == "cross-entropy":
            return softmax_cross_entropy(out, labels)
        # reconstruction-style target when shapes line up, zeros otherwise
        target = x if out.shape == x.shape else Tensor(np.zeros_like(out.data))
        return mse(out, target)

    with Tape() as tape:
        loss = compute_loss()
    tape.backward(loss)

    targets = list(params) + ([x] if x.requires_grad else [])
    rng = make_rng(seed, 0xF0)
    worst = 0.0
    for t in targets:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        if t.size <= max_coords_per_tensor:
            coords = np.arange(t.size)
        else:
            coords = rng.choice(t.size, size=max_coords_per_tensor, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            up = float(compute_loss().data)
            flat[i] = keep - h
            dn = float(compute_loss().data)
            flat[i] = keep
            numeric = (up - dn) / (2.0 * h)
            analytic = float(gflat[i])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
