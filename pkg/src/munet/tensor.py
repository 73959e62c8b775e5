"""Dense tensors with reverse-mode automatic differentiation.

Everything the networks need is built from the primitives in this module:
strided/padded 2-D convolution, its exact adjoint (transposed convolution),
2x2 max pooling, PReLU, batch normalization, inverted dropout, channel
concatenation, elementwise arithmetic, and the MSE loss.  Each primitive
records a backward closure on the output tensor; ``Tensor.backward`` replays
the graph in reverse topological order exactly once per node.

Activations and feature maps use the (batch, channels, height, width)
layout throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNormState",
    "conv2d",
    "transposed_conv2d",
    "maxpool2x2",
    "prelu",
    "batch_norm",
    "dropout",
    "concat_channels",
    "subtract",
    "add",
    "mse_loss",
    "tensor_sum",
    "grad_check",
    "GradCheckReport",
]

_param_counter = itertools.count()


class Tensor:
    """A dense numeric array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.dtype})"

    def detach(self):
        """Copy of the data as a fresh leaf tensor, cut off from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def sum(self):
        return tensor_sum(self)

    def backward(self, gradient=None):
        """Backpropagate from this tensor through the recorded graph.

        ``gradient`` defaults to ones, which for the scalar losses used in
        training is the usual seed.  Every reachable node's closure runs
        exactly once, in reverse topological order.
        """
        if gradient is None:
            gradient = np.ones_like(self.data)
        self._accumulate(np.asarray(gradient, dtype=self.data.dtype))

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A learnable tensor with a unique id and a role tag.

    Roles: ``conv-kernel``, ``bias``, ``prelu-alpha``, ``bn-scale``,
    ``bn-shift``.  The role drives initialization and optimizer clamping.
    """

    __slots__ = ("name", "role")

    def __init__(self, data, role, name=None, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.role = role
        self.name = name if name is not None else f"param{next(_param_counter)}"

    def __repr__(self):
        return f"Parameter(name={self.name!r}, role={self.role!r}, shape={self.shape})"


def _make(data, parents, op):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 op=op, parents=parents)
    return out


def _check_nonempty(x, op):
    if x.data.size == 0:
        raise ValueError(f"{op}: empty input tensor")


# ---------------------------------------------------------------------------
# convolution machinery
# ---------------------------------------------------------------------------

def _pad_hw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp, kh, kw, stride, h_out, w_out):
    """Gather conv windows of a padded NCHW array into (B, C*kh*kw, L) columns."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, h_out, w_out),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(b, c * kh * kw, h_out * w_out)


def _col2im(cols, shape, kh, kw, stride, h_out, w_out):
    """Scatter-add columns back onto a padded NCHW array (adjoint of _im2col)."""
    b, c, hp, wp = shape
    x = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, h_out, w_out)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, :, i, j]
    return x


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph, pw = 0, 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (w + 2 * pw - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    return ph, pw, h_out, w_out


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2-D convolution (cross-correlation) over an NCHW tensor.

    ``kernel`` is (out_ch, in_ch, kh, kw); ``padding='same'`` pads
    symmetrically by (k-1)//2 per axis, so odd kernels at stride 1 preserve
    spatial extents and stride 2 on even extents exactly halves them.
    """
    _check_nonempty(x, "conv2d")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    b, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d: kernel expects {ci} input channels, input has {c}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")

    ph, pw, h_out, w_out = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = _pad_hw(x.data, ph, pw)
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols).reshape(b, co, h_out, w_out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    result = _make(out, parents, "conv2d")
    if result.requires_grad:
        padded_shape = xp.shape

        def backward(g):
            gf = g.reshape(b, co, h_out * w_out)
            if kernel.requires_grad:
                gw = np.einsum("bon,bkn->ok", gf, cols).reshape(kernel.shape)
                kernel._accumulate(gw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gcols = np.einsum("ok,bon->bkn", wmat, gf)
                gxp = _col2im(gcols, padded_shape, kh, kw, stride, h_out, w_out)
                gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
                x._accumulate(gx)

        result._backward = backward
    return result


def transposed_conv2d(x, kernel, bias=None, stride=1):
    """Transposed 2-D convolution: the exact adjoint of same-padding conv2d.

    ``kernel`` is (in_ch, out_ch, kh, kw).  The forward pass is literally the
    input-gradient of ``conv2d(.., stride, 'same')``, so the inner-product
    identity <conv(x, K), y> == <x, tconv(y, K)> holds to rounding error, and
    stride 2 maps an HxW input to exactly 2H x 2W.
    """
    _check_nonempty(x, "transposed_conv2d")
    if stride < 1:
        raise ValueError(f"transposed_conv2d: stride must be positive, got {stride}")
    b, ci, h, w = x.shape
    kci, co, kh, kw = kernel.shape
    if kci != ci:
        raise ValueError(
            f"transposed_conv2d: kernel expects {kci} input channels, input has {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"transposed_conv2d: bias shape {bias.shape} != ({co},)")

    h_up, w_up = stride * h, stride * w
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    # Geometry of the conv this op is adjoint to: (h_up, w_up) -> (h, w).
    if (h_up + 2 * ph - kh) // stride + 1 != h or (w_up + 2 * pw - kw) // stride + 1 != w:
        raise ValueError(
            f"transposed_conv2d: kernel {kh}x{kw} at stride {stride} has no "
            f"same-padding adjoint with exact {stride}x up-sampling")

    wmat = kernel.data.reshape(ci, co * kh * kw)
    xf = x.data.reshape(b, ci, h * w)
    gcols = np.einsum("ik,bin->bkn", wmat, xf)
    padded_shape = (b, co, h_up + 2 * ph, w_up + 2 * pw)
    outp = _col2im(gcols, padded_shape, kh, kw, stride, h, w)
    out = outp[:, :, ph:ph + h_up, pw:pw + w_up] if (ph or pw) else outp
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    result = _make(out, parents, "transposed_conv2d")
    if result.requires_grad:

        def backward(g):
            gp = _pad_hw(g, ph, pw)
            cols_g = _im2col(gp, kh, kw, stride, h, w)
            if x.requires_grad:
                gx = np.einsum("ik,bkn->bin", wmat, cols_g).reshape(b, ci, h, w)
                x._accumulate(gx)
            if kernel.requires_grad:
                gw = np.einsum("bin,bkn->ik", xf, cols_g).reshape(kernel.shape)
                kernel._accumulate(gw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))

        result._backward = backward
    return result


# ---------------------------------------------------------------------------
# pooling and activation
# ---------------------------------------------------------------------------

def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Requires even spatial extents.  Backward routes the gradient to the
    argmax of each window; on ties the first element in row-major window
    order receives the whole gradient.
    """
    _check_nonempty(x, "maxpool2x2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial extents must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (x.data.reshape(b, c, ho, 2, wo, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(b, c, ho, wo, 4))
    out = windows.max(axis=-1)
    result = _make(out, (x,), "maxpool2x2")
    if result.requires_grad:
        idx = windows.argmax(axis=-1)

        def backward(g):
            gwin = np.zeros((b, c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gx = (gwin.reshape(b, c, ho, wo, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(b, c, h, w))
            x._accumulate(gx)

        result._backward = backward
    return result


def prelu(x, alpha):
    """Parametric ReLU, max(x, 0) + alpha * min(0, x), one alpha per channel."""
    _check_nonempty(x, "prelu")
    c = x.shape[1]
    if alpha.shape != (c,):
        raise ValueError(f"prelu: alpha shape {alpha.shape} != ({c},) for {c} channels")
    a = alpha.data
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise ValueError("prelu: alpha must lie strictly inside (0, 1)")
    a4 = a[None, :, None, None]
    neg = np.minimum(x.data, 0.0)
    out = np.maximum(x.data, 0.0) + a4 * neg
    result = _make(out, (x, alpha), "prelu")
    if result.requires_grad:

        def backward(g):
            if x.requires_grad:
                x._accumulate(g * np.where(x.data > 0.0, 1.0, a4))
            if alpha.requires_grad:
                alpha._accumulate((g * neg).sum(axis=(0, 2, 3)))

        result._backward = backward
    return result


# ---------------------------------------------------------------------------
# normalization and regularization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel running moments for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    decay: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype=np.float64, decay=0.9, eps=1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   decay, eps)

    def copy(self):
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.decay, self.eps)


def batch_norm(x, scale, shift, mode, state):
    """Per-channel batch normalization over (batch, height, width).

    Train mode normalizes with the batch moments and folds them into the
    running moments as ``decay * running + (1 - decay) * batch``; eval mode
    normalizes with the running moments.  Variance is the biased estimator,
    guarded by ``state.eps``.
    """
    _check_nonempty(x, "batch_norm")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError("batch_norm: scale/shift must have one entry per channel")
    if state.running_mean.shape != (c,) or state.running_var.shape != (c,):
        raise ValueError("batch_norm: state moments must have one entry per channel")

    eps = state.eps
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean *= state.decay
        state.running_mean += (1.0 - state.decay) * mean
        state.running_var *= state.decay
        state.running_var += (1.0 - state.decay) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
    result = _make(out, (x, scale, shift), "batch_norm")
    if result.requires_grad:
        n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        def backward(g):
            if shift.requires_grad:
                shift._accumulate(g.sum(axis=(0, 2, 3)))
            if scale.requires_grad:
                scale._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = g * scale.data[None, :, None, None]
                istd4 = inv_std[None, :, None, None]
                if mode == "train":
                    # Batch moments depend on x, so their gradients flow too.
                    sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    gx = istd4 * (gxhat - sum_g / n - xhat * sum_gx / n)
                else:
                    gx = gxhat * istd4
                x._accumulate(gx)

        result._backward = backward
    return result


def dropout(x, keep_prob, mode, rng=None):
    """Inverted dropout: zero elements and rescale survivors by 1/keep_prob.

    Eval mode (and keep_prob == 1) is an exact identity.  Train mode draws
    the mask from the caller-supplied generator, so identical seeds give
    bit-identical outputs.
    """
    _check_nonempty(x, "dropout")
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout: keep_prob must lie in (0, 1], got {keep_prob}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")

    if mode == "eval" or keep_prob == 1.0:
        result = _make(x.data, (x,), "dropout")
        if result.requires_grad:
            result._backward = lambda g: x._accumulate(g)
        return result

    if rng is None:
        raise ValueError("dropout: train mode requires an explicit rng")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob
    result = _make(x.data * mask, (x,), "dropout")
    if result.requires_grad:
        result._backward = lambda g: x._accumulate(g * mask)
    return result


# ---------------------------------------------------------------------------
# wiring and loss
# ---------------------------------------------------------------------------

def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis, ``a`` first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    result = _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_channels")
    if result.requires_grad:

        def backward(g):
            if a.requires_grad:
                a._accumulate(g[:, :ca])
            if b.requires_grad:
                b._accumulate(g[:, ca:])

        result._backward = backward
    return result


def subtract(a, b):
    """Elementwise a - b; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"subtract: shape mismatch {a.shape} vs {b.shape}")
    result = _make(a.data - b.data, (a, b), "subtract")
    if result.requires_grad:

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        result._backward = backward
    return result


def add(a, b):
    """Elementwise a + b; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    result = _make(a.data + b.data, (a, b), "add")
    if result.requires_grad:

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        result._backward = backward
    return result


def mse_loss(pred, target):
    """Mean over all elements of the squared difference, as a scalar tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    result = _make(np.asarray((diff * diff).sum() / n), (pred, target), "mse_loss")
    if result.requires_grad:

        def backward(g):
            scaled = (2.0 / n) * g * diff
            if pred.requires_grad:
                pred._accumulate(scaled)
            if target.requires_grad:
                target._accumulate(-scaled)

        result._backward = backward
    return result


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    result = _make(np.asarray(x.data.sum()), (x,), "sum")
    if result.requires_grad:
        result._backward = lambda g: x._accumulate(np.ones_like(x.data) * g)
    return result


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Analytic-vs-central-difference comparison for one subgraph."""

    entries: list = field(default_factory=list)  # (name, max_rel, mean_rel)
    max_rel: float = 0.0
    mean_rel: float = 0.0
    worst: str = ""

    def __str__(self):
        lines = [f"grad check: max_rel={self.max_rel:.3e} mean_rel={self.mean_rel:.3e} "
                 f"worst={self.worst}"]
        for name, mx, mn in self.entries:
            lines.append(f"  {name}: max_rel={mx:.3e} mean_rel={mn:.3e}")
        return "\n".join(lines)


def _rel_err(a, n):
    # Scaled difference, guarded at 1 so vanishing true gradients do not
    # blow up the ratio.
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1.0)


def grad_check(fn, wrt, eps=1e-5):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its subgraph from the current ``.data`` of the
    tensors in ``wrt`` and return a scalar tensor.  All checked tensors must
    be double precision and ``fn`` must be deterministic (run dropout in
    eval mode); a non-deterministic subgraph is rejected up front.
    """
    wrt = list(wrt)
    for t in wrt:
        if t.dtype != np.float64:
            raise ValueError("grad_check: all checked tensors must be float64")
        t.requires_grad = True

    first = fn()
    if first.shape != ():
        raise ValueError("grad_check: fn must return a scalar tensor")
    if not np.array_equal(first.data, fn().data):
        raise ValueError("grad_check: subgraph is not deterministic")

    for t in wrt:
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in wrt]

    report = GradCheckReport()
    all_rel = []
    for k, (t, ag) in enumerate(zip(wrt, analytic)):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * eps)
        rel = _rel_err(ag.reshape(-1), num)
        all_rel.append(rel)
        name = getattr(t, "name", None) or f"arg{k}"
        report.entries.append((name, float(rel.max()), float(rel.mean())))

    rel_cat = np.concatenate(all_rel) if all_rel else np.zeros(1)
    report.max_rel = float(rel_cat.max())
    report.mean_rel = float(rel_cat.mean())
    report.worst = max(report.entries, key=lambda e: e[1])[0] if report.entries else ""
    return report
