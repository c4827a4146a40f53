"""Dense tensor ops with hand-written reverse-mode gradients.

Tensors are C-contiguous (row-major) numpy arrays. Every op checks the exact
shapes it needs and raises :class:`DimensionError` otherwise; nothing is
broadcast implicitly. The training path runs in float32, the verification path
in float64 (whatever dtype the inputs carry is kept).

A classifier is a list of :class:`LayerSpec` plus a parallel list of parameter
tuples. :func:`forward` records a :class:`Trace` that :func:`backprop` replays
backwards; :func:`finite_diff_oracle` estimates the same gradients from forward
evaluations only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, StateError, ValidationError

LAYER_KINDS = ("affine", "conv2d", "relu", "maxpool2x2", "softmax-xent-head")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the classifier.

    ``dims`` holds kind-specific sizes:

    * affine: ``in_features``, ``out_features``
    * conv2d: ``in_channels``, ``out_channels``, ``kernel_h``, ``kernel_w``,
      ``stride``, ``pad``
    * relu, maxpool2x2, softmax-xent-head: no dims
    """

    kind: str
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        for name, value in self.dims.items():
            limit = 0 if name == "pad" else 1
            if int(value) != value or value < limit:
                raise ValidationError(f"{self.kind}: dim {name}={value} must be an integer >= {limit}")

    def param_shapes(self) -> tuple:
        d = self.dims
        if self.kind == "affine":
            return ((d["in_features"], d["out_features"]), (d["out_features"],))
        if self.kind == "conv2d":
            return (
                (d["out_channels"], d["in_channels"], d["kernel_h"], d["kernel_w"]),
                (d["out_channels"],),
            )
        return ()


@dataclass
class GradientBundle:
    """Gradients of the mean loss.

    ``param_grads[i]`` mirrors the parameter tuple of layer ``i`` (empty for
    parameter-free layers). ``input_grad`` has the shape of the input batch.
    """

    param_grads: list
    input_grad: np.ndarray | None


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _expect_ndim(op, name, a, ndim):
    if a.ndim != ndim:
        raise DimensionError(
            f"{op}: {name} must have {ndim} axes, got shape {a.shape}", axes=(name,)
        )


def _expect_axis(op, name_a, a, axis_a, name_b, b, axis_b):
    if a.shape[axis_a] != b.shape[axis_b]:
        raise DimensionError(
            f"{op}: {name_a} axis {axis_a} ({a.shape[axis_a]}) != "
            f"{name_b} axis {axis_b} ({b.shape[axis_b]})",
            axes=((name_a, axis_a), (name_b, axis_b)),
        )


# --- affine -----------------------------------------------------------------


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[i, j] = sum_k x[i, k] * W[k, j] + b[j]``."""
    _expect_ndim("affine_forward", "x", x, 2)
    _expect_ndim("affine_forward", "W", W, 2)
    _expect_ndim("affine_forward", "b", b, 1)
    _expect_axis("affine_forward", "x", x, 1, "W", W, 0)
    _expect_axis("affine_forward", "b", b, 0, "W", W, 1)
    return x @ W + b


def affine_backward(dout, x, W, need_params=True, need_input=True):
    dx = dout @ W.T if need_input else None
    if need_params:
        return dx, x.T @ dout, dout.sum(axis=0)
    return dx, None, None


# --- conv2d -----------------------------------------------------------------
#
# The graph keeps activations channels-last ([batch, h, w, c]) so that im2col
# copies contiguous channel runs. The public NCHW ops below wrap the same
# kernels.


def _conv_geometry(h, w, kh, kw, stride, pad):
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d_forward: stride={stride}, pad={pad} invalid", axes=("stride", "pad"))
    h_out = conv_output_size(h, kh, stride, pad)
    w_out = conv_output_size(w, kw, stride, pad)
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"conv2d_forward: derived output size {h_out}x{w_out} from input "
            f"{h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}",
            axes=(("x", "h"), ("x", "w")),
        )
    return h_out, w_out


def _conv_nhwc(x, K, b, stride, pad):
    """Channels-last convolution; returns the output and the im2col matrix."""
    if x.ndim != 4 or K.ndim != 4 or b.ndim != 1:
        raise DimensionError(f"conv2d_forward: x {x.shape}, K {K.shape}, b {b.shape} have wrong rank",
                             axes=("x", "K", "b"))
    batch, h, w, c_in = x.shape
    c_out, k_in, kh, kw = K.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d_forward: x channels ({c_in}) != K axis 1 ({k_in})",
                             axes=(("x", "c"), ("K", 1)))
    if b.shape[0] != c_out:
        raise DimensionError(f"conv2d_forward: b axis 0 ({b.shape[0]}) != K axis 0 ({c_out})",
                             axes=(("b", 0), ("K", 0)))
    h_out, w_out = _conv_geometry(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        x = np.ascontiguousarray(x)
    cols = np.empty((batch, h_out, w_out, kh, kw, c_in), dtype=x.dtype)
    sb, sh, sw, sc = x.strides
    for i in range(kh):
        # (kw, c_in) windows are contiguous runs of the padded row
        rows = as_strided(x[:, i:], shape=(batch, h_out, w_out, kw, c_in),
                          strides=(sb, sh * stride, sw * stride, sw, sc), writeable=False)
        cols[:, :, :, i] = rows
    cols = cols.reshape(batch * h_out * w_out, kh * kw * c_in)
    kmat = K.transpose(2, 3, 1, 0).reshape(kh * kw * c_in, c_out)
    out = (cols @ kmat + b).reshape(batch, h_out, w_out, c_out)
    return out, cols


def _conv_nhwc_backward(dout, cols, x_shape, K, stride, pad, need_params=True, need_input=True):
    batch, h, w, c_in = x_shape
    c_out, _, kh, kw = K.shape
    h_out, w_out = dout.shape[1], dout.shape[2]
    dmat = dout.reshape(-1, c_out)
    dK = db = dx = None
    if need_params:
        dK = (cols.T @ dmat).reshape(kh, kw, c_in, c_out).transpose(3, 2, 0, 1)
        dK = np.ascontiguousarray(dK)
        db = dmat.sum(axis=0)
    if need_input:
        kmat = K.transpose(2, 3, 1, 0).reshape(kh * kw * c_in, c_out)
        dcols = (dmat @ kmat.T).reshape(batch, h_out, w_out, kh, kw, c_in)
        dxp = np.zeros((batch, h + 2 * pad, w + 2 * pad, c_in), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad : pad + h, pad : pad + w, :]
    return dx, dK, db


def conv2d_forward(x: np.ndarray, K: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` [batch, c_in, h, w] with ``K`` [c_out, c_in, kh, kw].

    The input is zero-padded by ``pad`` on every spatial side.
    """
    _expect_ndim("conv2d_forward", "x", x, 4)
    _expect_ndim("conv2d_forward", "K", K, 4)
    _expect_axis("conv2d_forward", "x", x, 1, "K", K, 1)
    out, _ = _conv_nhwc(x.transpose(0, 2, 3, 1), K, b, stride, pad)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


# --- relu / maxpool ---------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def _pool_nhwc(x):
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise DimensionError(f"maxpool2x2: spatial dims of {x.shape} must be even", axes=(("x", "h"), ("x", "w")))
    a, b = x[:, 0::2, 0::2], x[:, 0::2, 1::2]
    c, d = x[:, 1::2, 0::2], x[:, 1::2, 1::2]
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def _pool_nhwc_backward(dout, x, out):
    # route each window's gradient to its first maximal element (row-major)
    dx = np.zeros(x.shape, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            hit = (x[:, di::2, dj::2] == out) & ~taken
            dx[:, di::2, dj::2] = dout * hit
            taken |= hit
    return dx


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """Max over non-overlapping 2x2 windows of ``x`` [batch, c, h, w]."""
    _expect_ndim("maxpool2x2", "x", x, 4)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(
            f"maxpool2x2: spatial dims {x.shape[2]}x{x.shape[3]} must be even",
            axes=(("x", 2), ("x", 3)),
        )
    return np.ascontiguousarray(_pool_nhwc(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2))


# --- loss -------------------------------------------------------------------


def _check_labels(labels, classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError(f"labels must be 1-d, got shape {labels.shape}", axes=("labels",))
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ValidationError(f"label {int(bad)} outside [0, {classes})")
    return labels.astype(np.intp)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the softmax probabilities.

    Rows are shifted by their max before exponentiation.
    """
    _expect_ndim("softmax_xent", "logits", logits, 2)
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"softmax_xent: {labels.shape[0]} labels for {logits.shape[0]} logit rows",
            axes=(("logits", 0), ("labels", 0)),
        )
    logp = _log_softmax(logits)
    loss = -logp[np.arange(labels.shape[0]), labels].mean()
    return float(loss), np.exp(logp)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent_backward(probs, labels):
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1
    d /= len(labels)
    return d


# --- graph ------------------------------------------------------------------


@dataclass
class Trace:
    """Intermediates retained by :func:`forward` for :func:`backprop`."""

    caches: list
    logits: np.ndarray
    loss: float | None = None
    probs: np.ndarray | None = None
    labels: np.ndarray | None = None


def check_params(layers: Sequence[LayerSpec], params: Sequence[tuple]):
    if len(params) != len(layers):
        raise DimensionError(f"{len(params)} parameter groups for {len(layers)} layers", axes=("params",))
    for i, (spec, group) in enumerate(zip(layers, params)):
        shapes = spec.param_shapes()
        if tuple(p.shape for p in group) != shapes:
            raise DimensionError(
                f"layer {i} ({spec.kind}): parameter shapes {[p.shape for p in group]} != {list(shapes)}",
                axes=(("params", i),),
            )


def _run_layers(layers, params, h, start, keep):
    """Apply ``layers[start:]`` to the channels-last activation ``h``."""
    caches = []
    for spec, group in zip(layers[start:], params[start:]):
        kind = spec.kind
        if kind == "softmax-xent-head":
            caches.append(None)
            break
        if kind == "affine":
            flat = h.reshape(h.shape[0], -1)
            out = affine_forward(flat, *group)
            cache = (h.shape, flat)
        elif kind == "conv2d":
            d = spec.dims
            out, cols = _conv_nhwc(h, group[0], group[1], d["stride"], d["pad"])
            cache = (h.shape, cols)
        elif kind == "relu":
            out = relu(h)
            cache = out
        else:
            out = _pool_nhwc(h)
            cache = (h, out)
        caches.append(cache if keep else None)
        h = out
    return caches, h


def forward(layers: Sequence[LayerSpec], params: Sequence[tuple], x: np.ndarray, labels=None, keep=True) -> Trace:
    """Run the layers on ``x`` [batch, c, h, w]; evaluate the loss head when ``labels`` is given.

    With ``keep=False`` no intermediates are stored and the returned trace
    cannot be used for :func:`backprop`. Affine layers flatten their input in
    (h, w, c) order.
    """
    if x.ndim != 4:
        raise DimensionError(f"forward: input must be [batch, c, h, w], got {x.shape}", axes=("x",))
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    caches, h = _run_layers(layers, params, h, 0, keep)
    trace = Trace(caches=caches if keep else [], logits=h)
    if labels is not None:
        trace.labels = _check_labels(labels, h.shape[1])
        trace.loss, trace.probs = softmax_xent(h, trace.labels)
    return trace


def backprop(layers: Sequence[LayerSpec], params: Sequence[tuple], trace: Trace | None,
             need_param_grads: bool = True, need_input_grad: bool = True) -> GradientBundle:
    """Reverse-mode gradients of ``trace.loss`` w.r.t. every parameter and the input.

    Skipping ``need_param_grads`` (attacks) or ``need_input_grad`` (training)
    avoids the corresponding matrix products.
    """
    if trace is None or trace.probs is None or len(trace.caches) == 0:
        raise StateError("backprop requires a forward trace with labels and retained intermediates")
    grad = softmax_xent_backward(trace.probs, trace.labels)
    param_grads = [() for _ in layers]
    for i in range(len(trace.caches) - 1, -1, -1):
        if grad is None:
            break
        spec, cache = layers[i], trace.caches[i]
        kind = spec.kind
        if kind == "softmax-xent-head":
            continue
        want_dx = need_input_grad or i > 0
        if kind == "affine":
            in_shape, flat = cache
            dx, dW, db = affine_backward(grad, flat, params[i][0], need_param_grads, want_dx)
            if need_param_grads:
                param_grads[i] = (dW, db)
            grad = dx.reshape(in_shape) if dx is not None else None
        elif kind == "conv2d":
            in_shape, cols = cache
            d = spec.dims
            dx, dK, db = _conv_nhwc_backward(grad, cols, in_shape, params[i][0], d["stride"], d["pad"],
                                             need_param_grads, want_dx)
            if need_param_grads:
                param_grads[i] = (dK, db)
            grad = dx
        elif kind == "relu":
            grad = relu_backward(grad, cache)
        else:
            grad = _pool_nhwc_backward(grad, *cache)
    input_grad = None
    if need_input_grad:
        input_grad = np.ascontiguousarray(grad.transpose(0, 3, 1, 2))
    return GradientBundle(param_grads=param_grads if need_param_grads else [], input_grad=input_grad)


# --- finite differences -----------------------------------------------------


def finite_diff_oracle(layers, params, x, labels, h=1e-4, coords=None, dtype=np.float64) -> GradientBundle:
    """Central-difference estimate ``(L(w+h) - L(w-h)) / 2h`` of every gradient.

    Runs in ``dtype`` (float64 by default; ``np.longdouble`` pushes the
    roundoff floor of the estimate far below 1e-12 for tiny components).
    ``coords`` restricts the estimate to a list of ``(target, flat_index)``
    pairs, where ``target`` is ``"input"`` or ``(layer, param)``; all other
    entries are NaN. Perturbing layer ``i`` only reruns layers ``i`` onward.
    """
    params = [tuple(np.array(p, dtype=dtype) for p in group) for group in params]
    x = np.array(x, dtype=dtype)
    labels = np.asarray(labels, dtype=np.intp)
    prefix = {}

    def activation_before(li):
        if li not in prefix:
            h0 = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
            prefix[li] = _run_layers(layers[:li], params[:li], h0, 0, False)[1] if li else h0
        return prefix[li]

    def loss(li):
        h0 = np.ascontiguousarray(x.transpose(0, 2, 3, 1)) if li is None else activation_before(li)
        logits = _run_layers(layers, params, h0, li or 0, False)[1]
        # kept in ``dtype``: softmax_xent would round the loss to a Python float
        return -_log_softmax(logits)[np.arange(len(labels)), labels].mean()

    def estimate(arr, flat_index, li):
        view = arr.reshape(-1)
        orig = view[flat_index]
        view[flat_index] = orig + h
        up = loss(li)
        view[flat_index] = orig - h
        down = loss(li)
        view[flat_index] = orig
        return (up - down) / (2 * h)

    if coords is None:
        coords = [("input", k) for k in range(x.size)]
        for li, group in enumerate(params):
            coords.extend(((li, pi), k) for pi, p in enumerate(group) for k in range(p.size))

    input_grad = np.full(x.shape, np.nan)
    param_grads = [tuple(np.full(p.shape, np.nan) for p in group) for group in params]
    for target, k in coords:
        if target == "input":
            input_grad.reshape(-1)[k] = estimate(x, k, None)
        else:
            li, pi = target
            param_grads[li][pi].reshape(-1)[k] = estimate(params[li][pi], k, li)
    return GradientBundle(param_grads=param_grads, input_grad=input_grad)


def activation_pattern(layers, params, x) -> list:
    """Which side of every ReLU kink and which max-pool winner each unit sits on."""
    trace = forward(layers, params, x)
    pattern = []
    for spec, cache in zip(layers, trace.caches):
        if spec.kind == "relu":
            pattern.append(cache > 0)
        elif spec.kind == "maxpool2x2":
            h, out = cache
            winner = np.full(out.shape, 4, dtype=np.int8)
            for slot, (di, dj) in reversed(list(enumerate(((0, 0), (0, 1), (1, 0), (1, 1))))):
                winner[h[:, di::2, dj::2] == out] = slot
            pattern.append(winner)
    return pattern


def stencil_crosses_kink(layers, params, x, target, flat_index, h=1e-4) -> bool:
    """True when moving coordinate ``(target, flat_index)`` by +-h changes a ReLU side or a pool winner.

    Central differences across such a point average two one-sided slopes and
    need not match the (sub)gradient backprop returns there.
    """
    params = [tuple(np.array(p, dtype=np.float64) for p in group) for group in params]
    x = np.array(x, dtype=np.float64)
    arr = x if target == "input" else params[target[0]][target[1]]
    view = arr.reshape(-1)
    orig = view[flat_index]
    base = activation_pattern(layers, params, x)
    for delta in (h, -h):
        view[flat_index] = orig + delta
        moved = activation_pattern(layers, params, x)
        view[flat_index] = orig
        if any(not np.array_equal(a, b) for a, b in zip(base, moved)):
            return True
    return False


def relative_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``; NaN entries of either side are ignored (0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.where(np.isnan(err), 0.0, err)


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) = 0``."""
    return np.sign(x)
