"""The classifier: architecture, init, prediction, gradients, SGD, checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, LengthError, StateError, ValidationError
from .rng import derive_seed, uniform_block

NUM_CLASSES = 10
DEFAULT_ARCH_ID = "mnist-cnn-v1"

CHECKPOINT_MAGIC = b"ATNN"
CHECKPOINT_VERSION = 1

# canonical dim order written to checkpoints
_DIM_ORDER = {
    "affine": ("in_features", "out_features"),
    "conv2d": ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "pad"),
    "relu": (),
    "maxpool2x2": (),
    "softmax-xent-head": (),
}


@dataclass
class Model:
    """Layer specs plus per-layer parameter tuples (``None`` until initialized)."""

    layers: list
    params: list | None = None
    arch_id: str = DEFAULT_ARCH_ID
    input_shape: tuple = (1, 28, 28)
    epoch: int = 0
    seed: int = 0

    @property
    def dtype(self):
        for group in self.params or ():
            for p in group:
                return p.dtype
        return np.dtype(np.float32)

    def require_params(self):
        if self.params is None:
            raise StateError(f"model {self.arch_id!r} has no parameters; call init_params first")
        return self.params

    def astype(self, dtype) -> "Model":
        params = [tuple(p.astype(dtype) for p in g) for g in self.require_params()]
        return replace(self, params=params)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def num_params(self) -> int:
        return sum(math.prod(s) for spec in self.layers for s in spec.param_shapes())


def infer_shapes(layers, input_shape):
    """Per-sample output shape after each layer; raises on non-conforming stacks."""
    shape = tuple(input_shape)
    shapes = []
    for i, spec in enumerate(layers):
        d = spec.dims
        if spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != d["in_channels"]:
                raise DimensionError(f"layer {i} conv2d expects {d['in_channels']} channels, got {shape}",
                                     axes=((i, "in_channels"),))
            h = T.conv_output_size(shape[1], d["kernel_h"], d["stride"], d["pad"])
            w = T.conv_output_size(shape[2], d["kernel_w"], d["stride"], d["pad"])
            if h < 1 or w < 1:
                raise DimensionError(f"layer {i} conv2d output {h}x{w} from {shape}", axes=((i, "spatial"),))
            shape = (d["out_channels"], h, w)
        elif spec.kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise DimensionError(f"layer {i} maxpool2x2 needs even spatial dims, got {shape}",
                                     axes=((i, "h"), (i, "w")))
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "affine":
            if math.prod(shape) != d["in_features"]:
                raise DimensionError(
                    f"layer {i} affine expects {d['in_features']} inputs, got {math.prod(shape)} from {shape}",
                    axes=((i, "in_features"),))
            shape = (d["out_features"],)
        shapes.append(shape)
    return shapes


def build_model(layers, input_shape=(1, 28, 28), arch_id="custom") -> Model:
    shapes = infer_shapes(layers, input_shape)
    if not shapes or shapes[-1] != (NUM_CLASSES,):
        raise DimensionError(f"final output must be ({NUM_CLASSES},), got {shapes[-1] if shapes else None}",
                             axes=("output",))
    return Model(layers=list(layers), arch_id=arch_id, input_shape=tuple(input_shape))


def build_default_arch(input_shape=(1, 28, 28)) -> Model:
    """conv5x5x32 - relu - pool - conv5x5x64 - relu - pool - fc1024 - relu - fc10."""
    c, h, w = input_shape
    flat = 64 * (h // 4) * (w // 4)
    layers = [
        T.LayerSpec("conv2d", dict(in_channels=c, out_channels=32, kernel_h=5, kernel_w=5, stride=1, pad=2)),
        T.LayerSpec("relu"),
        T.LayerSpec("maxpool2x2"),
        T.LayerSpec("conv2d", dict(in_channels=32, out_channels=64, kernel_h=5, kernel_w=5, stride=1, pad=2)),
        T.LayerSpec("relu"),
        T.LayerSpec("maxpool2x2"),
        T.LayerSpec("affine", dict(in_features=flat, out_features=1024)),
        T.LayerSpec("relu"),
        T.LayerSpec("affine", dict(in_features=1024, out_features=NUM_CLASSES)),
        T.LayerSpec("softmax-xent-head"),
    ]
    return build_model(layers, input_shape, arch_id=DEFAULT_ARCH_ID)


def _fan_in(shape):
    # conv kernels are [c_out, c_in, kh, kw]; affine weights are [in, out]
    return math.prod(shape[1:]) if len(shape) == 4 else shape[0]


def init_params(model: Model, seed: int, dtype=np.float32) -> Model:
    """He-uniform weights ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``, zero biases.

    Each layer draws from its own splitmix64 stream keyed by (seed, layer index).
    """
    params = []
    for i, spec in enumerate(model.layers):
        shapes = spec.param_shapes()
        if not shapes:
            params.append(())
            continue
        w_shape, b_shape = shapes
        bound = math.sqrt(6.0 / _fan_in(w_shape))
        u = uniform_block(derive_seed(seed, i), math.prod(w_shape))
        W = ((2.0 * u - 1.0) * bound).reshape(w_shape).astype(dtype)
        params.append((W, np.zeros(b_shape, dtype=dtype)))
    return replace(model, params=params, seed=seed, epoch=0)


def _check_images(model, images):
    expected = tuple(model.input_shape)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"images must be [batch, {', '.join(map(str, expected))}], got {images.shape}",
                             axes=("images",))


def predict(model: Model, images: np.ndarray) -> np.ndarray:
    """Logits [batch, 10]."""
    params = model.require_params()
    _check_images(model, images)
    return T.forward(model.layers, params, images.astype(model.dtype, copy=False), keep=False).logits


def loss_and_grads(model: Model, images, labels=None, need_param_grads=True, need_input_grad=True):
    """Mean cross-entropy on a batch and its full gradient bundle.

    ``images`` may be a :class:`~advtrain.data.Batch`, in which case labels come
    from it. Returns ``(loss, bundle, logits)``.
    """
    if labels is None:
        images, labels = images.images, images.labels
    params = model.require_params()
    _check_images(model, images)
    trace = T.forward(model.layers, params, images.astype(model.dtype, copy=False), labels)
    bundle = T.backprop(model.layers, params, trace, need_param_grads, need_input_grad)
    return trace.loss, bundle, trace.logits


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: list = field(default_factory=list)
    kind: str = "sgd-momentum"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_model(cls, model: Model, lr=0.01, momentum=0.9) -> "OptimizerState":
        velocity = [tuple(np.zeros_like(p) for p in g) for g in model.require_params()]
        return cls(lr=lr, momentum=momentum, velocity=velocity)


def sgd_step(model: Model, opt: OptimizerState, param_grads) -> tuple[Model, OptimizerState]:
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``. Updates arrays in place."""
    params = model.require_params()
    if len(param_grads) != len(params) or len(opt.velocity) != len(params):
        raise DimensionError(f"{len(param_grads)} gradient groups / {len(opt.velocity)} velocity groups "
                             f"for {len(params)} parameter groups", axes=("param_grads",))
    for li, (group, grads, vel) in enumerate(zip(params, param_grads, opt.velocity)):
        if len(grads) != len(group):
            raise DimensionError(f"layer {li}: {len(grads)} gradients for {len(group)} parameters",
                                 axes=((li, "param_grads"),))
        for pi, (p, g, v) in enumerate(zip(group, grads, vel)):
            if g.shape != p.shape or v.shape != p.shape:
                raise DimensionError(f"layer {li} param {pi}: gradient {g.shape} / velocity {v.shape} "
                                     f"!= parameter {p.shape}", axes=((li, pi),))
            lr = p.dtype.type(opt.lr)
            mom = p.dtype.type(opt.momentum)
            v *= mom
            v += g
            p -= lr * v
    return model, opt


# --- checkpoints ------------------------------------------------------------
#
# Little-endian layout:
#   b"ATNN" | u32 version | u16 len + utf8 arch_id | u32 epoch | u64 seed
#   u8 input ndim | u32 * ndim input shape | u32 n_layers
#   per layer: u8 kind index | u8 n_dims | u32 * n_dims | u8 n_params
#              per param: u8 ndim | u32 * ndim | f32 * prod(shape)
#   u8 has_velocity | (if 1) f32 payloads in parameter order | f64 lr | f64 momentum


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise LengthError(f"{self.path}: truncated at byte {self.pos}, need {n} more bytes, "
                              f"have {len(self.buf) - self.pos}",
                              expected=self.pos + n, actual=len(self.buf))
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, shape):
        n = math.prod(shape)
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def _encode(model: Model, opt: OptimizerState | None) -> bytes:
    params = model.require_params()
    out = bytearray(CHECKPOINT_MAGIC)
    arch = model.arch_id.encode("utf-8")
    out += struct.pack("<IH", CHECKPOINT_VERSION, len(arch)) + arch
    out += struct.pack("<IQ", model.epoch, model.seed & (2**64 - 1))
    out += struct.pack("<B", len(model.input_shape)) + struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<I", len(model.layers))
    for spec, group in zip(model.layers, params):
        names = _DIM_ORDER[spec.kind]
        out += struct.pack("<BB", T.LAYER_KINDS.index(spec.kind), len(names))
        out += struct.pack(f"<{len(names)}I", *(spec.dims[n] for n in names))
        out += struct.pack("<B", len(group))
        for p in group:
            out += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
            out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    if opt is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        for group in opt.velocity:
            for v in group:
                out += np.ascontiguousarray(v, dtype="<f4").tobytes()
        out += struct.pack("<dd", opt.lr, opt.momentum)
    return bytes(out)


def checkpoint_save(model: Model, opt: OptimizerState | None, path) -> None:
    Path(path).write_bytes(_encode(model, opt))


def checkpoint_load_state(path) -> tuple[Model, OptimizerState | None]:
    """Decode a checkpoint into the model and (if stored) its optimizer state."""
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    (version,) = r.unpack("I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}", offset=4)
    (arch_len,) = r.unpack("H")
    arch_id = r.take(arch_len).decode("utf-8")
    epoch, seed = r.unpack("IQ")
    (ndim,) = r.unpack("B")
    input_shape = r.unpack(f"{ndim}I")
    (n_layers,) = r.unpack("I")
    layers, params = [], []
    for li in range(n_layers):
        kind_idx, n_dims = r.unpack("BB")
        if kind_idx >= len(T.LAYER_KINDS):
            raise FormatError(f"{path}: layer {li} has unknown kind code {kind_idx}", offset=r.pos - 2)
        kind = T.LAYER_KINDS[kind_idx]
        names = _DIM_ORDER[kind]
        if n_dims != len(names):
            raise FormatError(f"{path}: layer {li} ({kind}) declares {n_dims} dims, expected {len(names)}",
                              offset=r.pos - 1)
        spec = T.LayerSpec(kind, dict(zip(names, r.unpack(f"{n_dims}I"))))
        (n_params,) = r.unpack("B")
        expected = spec.param_shapes()
        group = []
        for pi in range(n_params):
            (pdim,) = r.unpack("B")
            shape = r.unpack(f"{pdim}I")
            if pi >= len(expected) or tuple(shape) != expected[pi]:
                raise FormatError(f"{path}: layer {li} param {pi} shape {shape} does not match layer dims",
                                  offset=r.pos)
            group.append(r.floats(shape))
        if len(group) != len(expected):
            raise FormatError(f"{path}: layer {li} has {len(group)} params, expected {len(expected)}", offset=r.pos)
        layers.append(spec)
        params.append(tuple(group))
    (has_velocity,) = r.unpack("B")
    opt = None
    if has_velocity:
        velocity = [tuple(r.floats(p.shape) for p in g) for g in params]
        lr, momentum = r.unpack("dd")
        opt = OptimizerState(lr=lr, momentum=momentum, velocity=velocity)
    if r.pos != len(r.buf):
        raise LengthError(f"{path}: {len(r.buf) - r.pos} trailing bytes after payload",
                          expected=r.pos, actual=len(r.buf))
    model = Model(layers=layers, params=params, arch_id=arch_id, input_shape=tuple(input_shape),
                  epoch=epoch, seed=seed)
    infer_shapes(layers, input_shape)
    return model, opt


def checkpoint_load(path) -> Model:
    return checkpoint_load_state(path)[0]
