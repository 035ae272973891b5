"""Inception dilated CNN on numpy.

Three inception layers, each concatenating 3x3 convolutions at dilation
1, 2 and 3, with a 2x2 max pool after the first two, then a 3x3 convolution
at dilation 2 and a 1x1 convolution to one channel. A rectifier follows every
convolution including the last one, so predictions are nonnegative and sit
at a quarter of the input resolution.

Tensors are float64 arrays shaped (channels, height, width). Gradients are
computed by hand in reverse order of the forward tape.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, NamedTuple, Sequence

import numpy as np
import numpy.typing as npt

from . import (
    BATCH_SIZE,
    BRANCH_WIDTHS,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    INIT_BIAS,
    LEARNING_RATE,
    SEED,
    TAIL_CHANNELS,
)
from .errors import CheckpointError, EmptyRegionError, NonFiniteError, ShapeError
from .utils import atomic_write_bytes, json_dump, json_load


logger = logging.getLogger("regioncounter.idcnn")

Tensor = npt.NDArray[np.float64]
Params = dict[str, Tensor]
Optimizer = Literal["sgd", "adam"]
OPTIMIZERS = ("sgd", "adam")

INCEPTION_DILATIONS = (1, 2, 3)
POOL_AFTER = (0, 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"Kernel size must be odd, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"Dilation must be >= 1, got {self.dilation}")

    @property
    def padding(self) -> int:
        "Keeps the spatial size."
        return self.dilation * (self.kernel - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class InceptionDilatedLayer:
    in_channels: int
    width: int

    @property
    def branches(self) -> tuple[ConvSpec, ...]:
        return tuple(
            ConvSpec(self.in_channels, self.width, 3, d) for d in INCEPTION_DILATIONS
        )

    @property
    def out_channels(self) -> int:
        return self.width * len(INCEPTION_DILATIONS)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    branch_widths: tuple[int, int, int] = BRANCH_WIDTHS
    tail_channels: int = TAIL_CHANNELS
    tail_dilation: int = 2

    def __post_init__(self):
        if len(self.branch_widths) != 3:
            raise ValueError(f"Need three inception layers, got {len(self.branch_widths)}")
        if min(self.branch_widths) < 1 or self.tail_channels < 1 or self.in_channels < 1:
            raise ValueError(f"Channel counts must be positive: {self}")

    @property
    def layers(self) -> tuple[InceptionDilatedLayer, ...]:
        layers = []
        channels = self.in_channels
        for width in self.branch_widths:
            layers.append(InceptionDilatedLayer(channels, width))
            channels = layers[-1].out_channels
        return tuple(layers)

    @property
    def tail(self) -> ConvSpec:
        return ConvSpec(self.layers[-1].out_channels, self.tail_channels, 3, self.tail_dilation)

    @property
    def head(self) -> ConvSpec:
        return ConvSpec(self.tail_channels, 1, 1, 1)

    def convs(self) -> list[tuple[str, ConvSpec]]:
        "Every convolution with its parameter name prefix, in declaration order."
        named = []
        for i, layer in enumerate(self.layers, start=1):
            for spec in layer.branches:
                named.append((f"incep{i}.d{spec.dilation}", spec))
        named.append(("tail", self.tail))
        named.append(("head", self.head))
        return named

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = dict[str, tuple[int, ...]]()
        for prefix, spec in self.convs():
            shapes[f"{prefix}.weight"] = spec.weight_shape
            shapes[f"{prefix}.bias"] = (spec.out_channels,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "branch_widths": list(self.branch_widths),
            "tail_channels": self.tail_channels,
            "tail_dilation": self.tail_dilation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            in_channels=int(d.get("in_channels", 3)),
            branch_widths=tuple(int(w) for w in d.get("branch_widths", BRANCH_WIDTHS)),  # type: ignore
            tail_channels=int(d.get("tail_channels", TAIL_CHANNELS)),
            tail_dilation=int(d.get("tail_dilation", 2)),
        )


@dataclass(frozen=True, eq=False)
class TrainState:
    config: NetworkConfig
    params: Params
    step: int = 0
    learning_rate: float = LEARNING_RATE
    rng_seed: int = SEED
    optimizer: Optimizer = "sgd"
    moments: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    last_loss: float | None = None

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


class TrainExample(NamedTuple):
    frame_id: str
    frame: Tensor
    target: Tensor
    mask: npt.NDArray[np.bool_]


def init_params(config: NetworkConfig, seed: int = SEED) -> Params:
    """Weights uniform in +-1/sqrt(fan_in). Every bias starts at `INIT_BIAS`,
    slightly positive so each rectifier passes gradient from the first step.
    """
    rng = np.random.default_rng(seed)
    params = Params()
    for prefix, spec in config.convs():
        bound = 1 / np.sqrt(spec.fan_in)
        params[f"{prefix}.weight"] = rng.uniform(-bound, bound, spec.weight_shape)
        params[f"{prefix}.bias"] = np.full(spec.out_channels, INIT_BIAS)
    return params


def check_finite(arr: Tensor, where: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(where)


# Convolution


def _check_conv_args(input: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor):
    if input.ndim != 3:
        raise ShapeError(f"Expected a (C, H, W) input, got shape {input.shape}")
    if input.shape[0] != spec.in_channels:
        raise ShapeError(
            f"Input has {input.shape[0]} channels, convolution expects {spec.in_channels}"
        )
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"Weights are {weights.shape}, expected {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"Bias is {bias.shape}, expected ({spec.out_channels},)")


def _im2col(input: Tensor, spec: ConvSpec) -> Tensor:
    "(C*k*k, H*W) matrix of dilated taps around every output pixel."
    c, h, w = input.shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    padded = np.pad(input, ((0, 0), (p, p), (p, p))) if p else input
    cols = np.empty((c, k, k, h, w))
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = padded[:, ky * d : ky * d + h, kx * d : kx * d + w]
    return cols.reshape(c * k * k, h * w)


def _col2im(cols: Tensor, spec: ConvSpec, shape: tuple[int, ...]) -> Tensor:
    c, h, w = shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    cols = cols.reshape(c, k, k, h, w)
    padded = np.zeros((c, h + 2 * p, w + 2 * p))
    for ky in range(k):
        for kx in range(k):
            padded[:, ky * d : ky * d + h, kx * d : kx * d + w] += cols[:, ky, kx]
    return padded[:, p : p + h, p : p + w]


def _conv_forward(
    input: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor
) -> tuple[Tensor, Tensor]:
    _check_conv_args(input, spec, weights, bias)
    _, h, w = input.shape
    cols = _im2col(input, spec)
    out = weights.reshape(spec.out_channels, -1) @ cols + bias[:, None]
    return out.reshape(spec.out_channels, h, w), cols


def conv2d_dilated(input: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """Same-size cross-correlation with taps spaced `spec.dilation` apart.
    Accepts (C, H, W) or a stacked (N, C, H, W) batch.
    """
    if input.ndim == 4:
        return np.stack([conv2d_dilated(x, spec, weights, bias) for x in input])
    return _conv_forward(input, spec, weights, bias)[0]


def conv2d_dilated_backward(
    grad_out: Tensor,
    input: Tensor,
    spec: ConvSpec,
    weights: Tensor,
    cols: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    "Gradients with respect to input, weights and bias."
    if cols is None:
        cols = _im2col(input, spec)
    g = grad_out.reshape(spec.out_channels, -1)
    grad_w = (g @ cols.T).reshape(spec.weight_shape)
    grad_b = g.sum(axis=1)
    grad_cols = weights.reshape(spec.out_channels, -1).T @ g
    return _col2im(grad_cols, spec, input.shape), grad_w, grad_b


def inception_forward(
    input: Tensor,
    layer: InceptionDilatedLayer,
    branch_params: Sequence[tuple[Tensor, Tensor]],
) -> Tensor:
    "Branch outputs stacked along channels in dilation order 1, 2, 3."
    outs = [
        conv2d_dilated(input, spec, w, b)
        for spec, (w, b) in zip(layer.branches, branch_params, strict=True)
    ]
    shapes = {out.shape[1:] for out in outs}
    assert len(shapes) == 1, f"inception branches disagree on spatial size: {shapes}"
    return np.concatenate(outs, axis=0)


# Pooling and rectifier


def _pool_forward(input: Tensor) -> tuple[Tensor, npt.NDArray[np.intp], tuple[int, ...]]:
    c, h, w = input.shape
    ph, pw = h + h % 2, w + w % 2
    if (ph, pw) != (h, w):
        padded = np.full((c, ph, pw), -np.inf)
        padded[:, :h, :w] = input
    else:
        padded = input
    windows = (
        padded.reshape(c, ph // 2, 2, pw // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, ph // 2, pw // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx, input.shape


def maxpool2(input: Tensor) -> Tensor:
    "2x2 max pool with stride 2; odd sizes are padded with -inf."
    return _pool_forward(input)[0]


def maxpool2_backward(
    grad_out: Tensor, idx: npt.NDArray[np.intp], input_shape: tuple[int, ...]
) -> Tensor:
    c, h, w = input_shape
    oh, ow = idx.shape[1:]
    windows = np.zeros((c, oh, ow, 4))
    np.put_along_axis(windows, idx[..., None], grad_out[..., None], axis=-1)
    grad = windows.reshape(c, oh, ow, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, oh * 2, ow * 2)
    return grad[:, :h, :w]


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, pre_activation: Tensor) -> Tensor:
    return grad_out * (pre_activation > 0)


# Network


class _ConvRecord(NamedTuple):
    name: str
    spec: ConvSpec
    input: Tensor
    cols: Tensor


class _LayerRecord(NamedTuple):
    convs: list[_ConvRecord]
    pre_activation: Tensor
    pool: tuple[npt.NDArray[np.intp], tuple[int, ...]] | None


def check_input_shape(frame: Tensor, config: NetworkConfig):
    if frame.ndim != 3 or frame.shape[0] != config.in_channels:
        raise ShapeError(
            f"Expected a ({config.in_channels}, H, W) frame, got shape {frame.shape}"
        )
    _, h, w = frame.shape
    if h % 4 or w % 4:
        raise ShapeError(
            f"Frame is {h}x{w}; height and width must be divisible by 4, zero-pad the frame first"
        )


def pad_frame(frame: Tensor, multiple: int = 4) -> Tensor:
    "Zero-pad the top rows and right columns of a (C, H, W) frame up to `multiple`."
    _, h, w = frame.shape
    ph, pw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    if (ph, pw) == (h, w):
        return frame
    return np.pad(frame, ((0, 0), (0, ph - h), (0, pw - w)))


def _forward_tape(
    config: NetworkConfig, params: Params, frame: Tensor, checked: bool = False
) -> tuple[Tensor, list[_LayerRecord]]:
    check_input_shape(frame, config)
    tape = list[_LayerRecord]()
    x = frame

    def conv(name: str, spec: ConvSpec, input: Tensor) -> tuple[Tensor, _ConvRecord]:
        out, cols = _conv_forward(input, spec, params[f"{name}.weight"], params[f"{name}.bias"])
        if checked:
            check_finite(out, name)
        return out, _ConvRecord(name, spec, input, cols)

    for i, layer in enumerate(config.layers):
        outs, records = [], []
        for spec in layer.branches:
            out, record = conv(f"incep{i + 1}.d{spec.dilation}", spec, x)
            outs.append(out)
            records.append(record)
        z = np.concatenate(outs, axis=0)
        x = relu(z)
        pool = None
        if i in POOL_AFTER:
            x, idx, shape = _pool_forward(x)
            pool = (idx, shape)
        tape.append(_LayerRecord(records, z, pool))

    for name, spec in (("tail", config.tail), ("head", config.head)):
        z, record = conv(name, spec, x)
        x = relu(z)
        tape.append(_LayerRecord([record], z, None))
    return x, tape


def forward(config: NetworkConfig, params: Params, frame: Tensor, checked: bool = False) -> Tensor:
    "(1, H/4, W/4) nonnegative density prediction for a (C, H, W) frame."
    return _forward_tape(config, params, frame, checked)[0]


def _backward_tape(grad: Tensor, tape: list[_LayerRecord], params: Params) -> Params:
    grads = Params()
    for record in reversed(tape):
        if record.pool is not None:
            grad = maxpool2_backward(grad, *record.pool)
        grad = relu_backward(grad, record.pre_activation)
        grad_in = None
        start = 0
        for conv in record.convs:
            stop = start + conv.spec.out_channels
            g_x, g_w, g_b = conv2d_dilated_backward(
                grad[start:stop], conv.input, conv.spec, params[f"{conv.name}.weight"], conv.cols
            )
            grads[f"{conv.name}.weight"] = g_w
            grads[f"{conv.name}.bias"] = g_b
            grad_in = g_x if grad_in is None else grad_in + g_x
            start = stop
        assert grad_in is not None
        grad = grad_in
    return grads


def loss_mse(pred: Tensor, target: Tensor, mask: npt.NDArray[np.bool_]) -> float:
    "Mean squared error over the distant cells of a quarter-resolution mask."
    return _loss_and_grad(pred, target, mask)[0]


def _loss_and_grad(
    pred: Tensor, target: Tensor, mask: npt.NDArray[np.bool_]
) -> tuple[float, Tensor]:
    pred2d = pred.reshape(pred.shape[-2:])
    if pred2d.shape != target.shape or target.shape != mask.shape:
        raise ShapeError(
            f"Prediction {pred2d.shape}, target {target.shape} and mask {mask.shape} differ"
        )
    n = int(mask.sum())
    if n == 0:
        raise EmptyRegionError("No distant cells to compute the loss over")
    diff = np.where(mask, pred2d - target, 0.0)
    loss = float((diff * diff).sum() / n)
    return loss, (2.0 / n * diff).reshape(pred.shape)


def loss_and_grads(
    config: NetworkConfig, params: Params, batch: Sequence[TrainExample]
) -> tuple[float, Params]:
    """Mean loss over the batch and its exact gradients. Per-example
    gradients are summed in batch order.
    """
    if not batch:
        raise ValueError("Empty batch")
    total_loss = 0.0
    total = {name: np.zeros_like(p) for name, p in params.items()}
    for example in batch:
        pred, tape = _forward_tape(config, params, example.frame)
        loss, grad = _loss_and_grad(pred, example.target, example.mask)
        total_loss += loss
        for name, g in _backward_tape(grad, tape, params).items():
            total[name] += g
    n = len(batch)
    return total_loss / n, {name: g / n for name, g in total.items()}


def backward_and_step(
    state: TrainState,
    batch: Sequence[TrainExample],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    loss, grads = loss_and_grads(state.config, state.params, batch)
    if not np.isfinite(loss):
        raise NonFiniteError("loss", state.step)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}", state.step)

    lr = state.learning_rate
    params = Params()
    moments = dict(state.moments)
    match state.optimizer:
        case "sgd":
            for name, p in state.params.items():
                params[name] = p - lr * grads[name]
        case "adam":
            t = state.step + 1
            for name, p in state.params.items():
                m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = beta1 * m + (1 - beta1) * grads[name]
                v = beta2 * v + (1 - beta2) * grads[name] ** 2
                moments[name] = (m, v)
                m_hat = m / (1 - beta1**t)
                v_hat = v / (1 - beta2**t)
                params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        case _:
            raise ValueError(f"Unknown optimizer: {state.optimizer}")
    return replace(state, params=params, step=state.step + 1, moments=moments, last_loss=loss)


def new_state(
    config: NetworkConfig,
    seed: int = SEED,
    learning_rate: float = LEARNING_RATE,
    optimizer: Optimizer = "sgd",
) -> TrainState:
    if not learning_rate >= 0:
        raise ValueError(f"Learning rate must be nonnegative, got {learning_rate}")
    return TrainState(config, init_params(config, seed), 0, learning_rate, seed, optimizer)


def train(
    state: TrainState,
    examples: Sequence[TrainExample],
    steps: int,
    batch_size: int = BATCH_SIZE,
    log_every: int = 10,
    on_step: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run `steps` descent steps over `examples`, reshuffled every epoch
    from the state's seed.
    """
    if not examples:
        raise ValueError("No training examples")
    rng = np.random.default_rng(state.rng_seed)
    order = list[int]()
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(int(i) for i in rng.permutation(len(examples)))
        picked, order = order[:batch_size], order[batch_size:]
        state = backward_and_step(state, [examples[i] for i in picked])
        level = logging.INFO if state.step % log_every == 0 or state.step == 1 else logging.DEBUG
        logger.log(level, f"step {state.step}: loss {state.last_loss:.6g}")
        if on_step:
            on_step(state)
    return state


def predict_density(config: NetworkConfig, params: Params, frame: Tensor) -> Tensor:
    return forward(config, params, frame)[0]


def predict_count(
    config: NetworkConfig, params: Params, frame: Tensor, mask: npt.NDArray[np.bool_]
) -> float:
    "Integral of the prediction over the distant cells of a quarter-resolution mask."
    return float(np.where(mask, predict_density(config, params, frame), 0.0).sum())


# Input normalization


def channel_mean(images: Sequence[Tensor]) -> tuple[float, ...]:
    "Per-channel mean of 0..255 frames scaled to [0, 1]."
    if not images:
        raise ValueError("No images to compute statistics from")
    sums = np.sum([img.reshape(img.shape[0], -1).mean(axis=1) for img in images], axis=0)
    return tuple(float(v) for v in sums / (255.0 * len(images)))


def prepare_input(image: Tensor, mean: Sequence[float]) -> Tensor:
    return image / 255.0 - np.asarray(mean, dtype=np.float64)[:, None, None]


# Checkpoints


class Checkpoint(NamedTuple):
    config: NetworkConfig
    params: Params
    channel_mean: tuple[float, ...]
    step: int


_HEADER = struct.Struct("<4sII")


def save_checkpoint(
    path: Path,
    config: NetworkConfig,
    params: Params,
    channel_mean: Sequence[float],
    step: int,
):
    """Magic, version, header length, JSON header, then every parameter as
    little-endian float64 in declaration order.
    """
    header = json_dump(
        {"config": config.to_dict(), "channel_mean": list(channel_mean), "step": step}
    )
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header]
    for name, shape in config.param_shapes().items():
        arr = params[name]
        if arr.shape != shape:
            raise ShapeError(f"Parameter {name} is {arr.shape}, config says {shape}")
        chunks.append(arr.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path: Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size + header_len
    header = json_load(data[_HEADER.size : offset])
    config = NetworkConfig.from_dict(header["config"])

    params = Params()
    for name, shape in config.param_shapes().items():
        size = int(np.prod(shape))
        end = offset + 8 * size
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return Checkpoint(config, params, tuple(header["channel_mean"]), int(header["step"]))
