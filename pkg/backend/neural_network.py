import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ModelFormatError, NumericalError, ShapeError
from random_streams import rng_for

logger = logging.getLogger(__name__)

HLW_MAGIC = "HLW1"


def _frozen_array(values, name: str, ndim: int) -> np.ndarray:
    """Copy to a read-only float64 array and check rank and finiteness"""
    array = np.array(values, dtype=np.float64)
    if array.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{name} contains non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Linear:
    """Dense layer: out_k = sum_j a_j w_jk + b_k, weights stored as (out, in)"""
    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_array(self.weights, "weights", 2))
        if self.bias is not None:
            bias = _frozen_array(self.bias, "bias", 1)
            if bias.shape[0] != self.weights.shape[0]:
                raise ShapeError(f"bias of length {bias.shape[0]} for {self.weights.shape[0]} outputs")
            object.__setattr__(self, "bias", bias)

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ReLU:
    """Elementwise rectification"""


@dataclass(frozen=True)
class SquaredDistance:
    """Squared Euclidean distances to K templates stored as (K, in)"""
    templates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "templates", _frozen_array(self.templates, "templates", 2))

    @property
    def in_features(self) -> int:
        return self.templates.shape[1]


@dataclass(frozen=True)
class NegLogSumExp:
    """Soft-min pooling with kernel stiffness gamma"""
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"kernel stiffness must be positive and finite, got {self.gamma}")


@dataclass(frozen=True)
class AveragePool:
    """Arithmetic mean over a pool of N neurons"""
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"pool size must be positive, got {self.size}")


Layer = Union[Linear, ReLU, SquaredDistance, NegLogSumExp, AveragePool]


# --- Layer forward passes -------------------------------------------------

def linear_forward(layer: Linear, a: np.ndarray) -> np.ndarray:
    """Apply a dense layer to a vector (in,) or a batch (n, in)"""
    if a.shape[-1] != layer.in_features:
        raise ShapeError(f"linear layer expects {layer.in_features} inputs, got {a.shape[-1]}")
    out = a @ layer.weights.T
    if layer.bias is not None:
        out = out + layer.bias
    return out


def relu_forward(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def squared_distance_forward(layer: SquaredDistance, a: np.ndarray) -> np.ndarray:
    """Distances d_k = ||a - mu_k||^2; a vector gives (K,), a batch gives (n, K)"""
    if a.shape[-1] != layer.in_features:
        raise ShapeError(
            f"squared distance layer expects {layer.in_features} inputs, got {a.shape[-1]}"
        )
    diff = a[..., None, :] - layer.templates
    return np.sum(diff * diff, axis=-1)


def neg_lse_pool_forward(layer: NegLogSumExp, d: np.ndarray) -> float:
    """
    Soft minimum -1/gamma * log sum_j exp(-gamma d_j).

    The minimum is factored out before exponentiating, so large stiffness
    times large distances cannot overflow. The result lies in
    [min d - log(K)/gamma, min d].
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ShapeError("negative log-sum-exp pooling over an empty pool")
    shift = d.min()
    total = np.sum(np.exp(-layer.gamma * (d - shift)))
    return float(shift - np.log(total) / layer.gamma)


def average_pool_forward(layer: AveragePool, a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size != layer.size:
        raise ShapeError(f"average pool of size {layer.size} got {a.size} inputs")
    return float(np.sum(a) / layer.size)


def layer_forward(layer: Layer, a: np.ndarray) -> np.ndarray:
    """Dispatch one layer; pooling layers return a 0-d array"""
    if isinstance(layer, Linear):
        return linear_forward(layer, a)
    if isinstance(layer, ReLU):
        return relu_forward(a)
    if isinstance(layer, SquaredDistance):
        return squared_distance_forward(layer, a)
    if isinstance(layer, NegLogSumExp):
        return np.asarray(neg_lse_pool_forward(layer, a))
    if isinstance(layer, AveragePool):
        return np.asarray(average_pool_forward(layer, a))
    raise ModelFormatError(f"unsupported layer kind {type(layer).__name__}")


# --- Stacks ---------------------------------------------------------------

@dataclass
class ActivationTrace:
    """Per-layer inputs and outputs recorded during one forward pass"""
    inputs: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.outputs)

    def record(self, layer_input: np.ndarray, layer_output: np.ndarray):
        self.inputs.append(layer_input)
        self.outputs.append(layer_output)


def chain_width(layers: Sequence[Layer], width: int) -> int:
    """Walk the layer list and return the output width, checking every link"""
    for index, layer in enumerate(layers):
        if isinstance(layer, Linear):
            if layer.in_features != width:
                raise ShapeError(f"layer {index}: linear expects {layer.in_features} inputs, chain has {width}")
            width = layer.out_features
        elif isinstance(layer, SquaredDistance):
            if layer.in_features != width:
                raise ShapeError(f"layer {index}: templates have {layer.in_features} dims, chain has {width}")
            width = layer.templates.shape[0]
        elif isinstance(layer, AveragePool):
            if layer.size != width:
                raise ShapeError(f"layer {index}: pool of size {layer.size} over {width} neurons")
            width = 1
        elif isinstance(layer, NegLogSumExp):
            width = 1
        elif not isinstance(layer, ReLU):
            raise ModelFormatError(f"layer {index}: unsupported kind {type(layer).__name__}")
    return width


class LayerStack:
    """Ordered layers applied to flat vectors or batches of flat vectors"""

    def __init__(self, layers: Sequence[Layer], input_dim: int):
        if input_dim < 1:
            raise ShapeError(f"input dimension must be positive, got {input_dim}")
        self.layers: Tuple[Layer, ...] = tuple(layers)
        self.input_dim = input_dim
        self.output_dim = chain_width(self.layers, input_dim)

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ActivationTrace]:
        """Run the stack on (input_dim,) or (n, input_dim), recording every layer"""
        a = np.asarray(x, dtype=np.float64)
        if a.shape[-1] != self.input_dim:
            raise ShapeError(f"stack expects {self.input_dim} inputs, got shape {a.shape}")
        trace = ActivationTrace()
        for layer in self.layers:
            out = layer_forward(layer, a)
            trace.record(a, out)
            a = out
        return a, trace

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


class NeuralizedModel(LayerStack):
    """A detector rewritten as a layer stack whose output is the outlier score"""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int],
                 kind: str = "", class_name: str = ""):
        self.input_shape = tuple(int(s) for s in input_shape)
        super().__init__(layers, int(np.prod(self.input_shape)))
        if self.output_dim != 1:
            raise ShapeError(f"neuralized model must end in a scalar, chain ends with width {self.output_dim}")
        self.kind = kind
        self.class_name = class_name

    def flatten_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape and x.shape != (self.input_dim,):
            raise ShapeError(f"model expects input of shape {self.input_shape}, got {x.shape}")
        return x.reshape(-1)


def model_forward(model: NeuralizedModel, x: np.ndarray) -> Tuple[float, ActivationTrace]:
    """Score one sample and return the trace the relevance pass walks back"""
    out, trace = model.forward(model.flatten_input(x))
    return float(np.reshape(out, -1)[0]), trace


# --- Gradients ------------------------------------------------------------

@dataclass
class LinearGradient:
    weights: np.ndarray
    bias: Optional[np.ndarray] = None


@dataclass
class GradientResult:
    """Loss value plus one entry per layer (None for parameter-free layers)"""
    loss: float
    gradients: List[Optional[LinearGradient]]


def reconstruction_loss(network: LayerStack, batch: np.ndarray) -> float:
    """Mean over the batch of the squared reconstruction error"""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    diff = network(batch) - batch
    return float(np.mean(np.sum(diff * diff, axis=1)))


def model_gradient(network: LayerStack, batch: np.ndarray,
                   loss: str = "squared_reconstruction") -> GradientResult:
    """
    Gradients of the batch reconstruction loss with respect to every Linear layer.

    The loss is (1/n) sum_i ||f(x_i) - x_i||^2. Derivatives are obtained by
    walking the recorded activation trace backwards.

    Args:
        network: Linear/ReLU stack mapping inputs back onto the input space
        batch: Array of shape (n, input_dim)
        loss: Only "squared_reconstruction" is supported

    Returns:
        GradientResult with the loss and per-layer gradients
    """
    if loss != "squared_reconstruction":
        raise ValueError(f"unsupported loss {loss!r}")
    if network.output_dim != network.input_dim:
        raise ShapeError("reconstruction loss needs output width equal to input width")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = batch.shape[0]

    out, trace = network.forward(batch)
    diff = out - batch
    value = float(np.mean(np.sum(diff * diff, axis=1)))
    if not np.isfinite(value):
        raise NumericalError(f"non-finite reconstruction loss {value}")

    delta = 2.0 * diff / n
    gradients: List[Optional[LinearGradient]] = [None] * len(network.layers)
    for index in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[index]
        a_in = trace.inputs[index]
        if isinstance(layer, Linear):
            grad_bias = delta.sum(axis=0) if layer.bias is not None else None
            gradients[index] = LinearGradient(weights=delta.T @ a_in, bias=grad_bias)
            delta = delta @ layer.weights
        elif isinstance(layer, ReLU):
            delta = delta * (a_in > 0)
        else:
            raise ModelFormatError(f"cannot differentiate through {type(layer).__name__}")
    return GradientResult(loss=value, gradients=gradients)


# --- Backbones ------------------------------------------------------------

def random_backbone(input_dim: int, widths: Sequence[int], seed: int) -> LayerStack:
    """Seeded bias-free Linear/ReLU projection stack standing in for a pretrained extractor"""
    rng = rng_for(seed, "backbone")
    layers: List[Layer] = []
    width = input_dim
    for out in widths:
        weights = rng.normal(0.0, np.sqrt(2.0 / width), size=(out, width))
        layers.extend([Linear(weights), ReLU()])
        width = out
    return LayerStack(layers, input_dim)


def validate_backbone(layers: Sequence[Layer]):
    """A backbone is zero or more (Linear, ReLU) pairs"""
    if len(layers) % 2:
        raise ModelFormatError("backbone must consist of Linear/ReLU pairs")
    for index in range(0, len(layers), 2):
        if not (isinstance(layers[index], Linear) and isinstance(layers[index + 1], ReLU)):
            kinds = f"{type(layers[index]).__name__}/{type(layers[index + 1]).__name__}"
            raise ModelFormatError(f"unsupported backbone layers at {index}: {kinds}")


# --- HLW1 weight files ----------------------------------------------------

def _header_line(layer: Layer) -> str:
    if isinstance(layer, Linear):
        return f"linear {layer.out_features} {layer.in_features} {int(layer.bias is not None)}"
    if isinstance(layer, ReLU):
        return "relu"
    if isinstance(layer, SquaredDistance):
        return f"sqdist {layer.templates.shape[0]} {layer.templates.shape[1]}"
    if isinstance(layer, NegLogSumExp):
        return f"neglse {float(layer.gamma)!r}"
    if isinstance(layer, AveragePool):
        return f"avgpool {layer.size}"
    raise ModelFormatError(f"unsupported layer kind {type(layer).__name__}")


def save_layers(path: Union[str, Path], layers: Sequence[Layer]):
    """Write layers as an HLW1 file: ASCII header, blank line, little-endian float32 payloads"""
    header = "\n".join([HLW_MAGIC] + [_header_line(layer) for layer in layers]) + "\n\n"
    chunks = [header.encode("ascii")]
    for layer in layers:
        if isinstance(layer, Linear):
            chunks.append(layer.weights.astype("<f4").tobytes())
            if layer.bias is not None:
                chunks.append(layer.bias.astype("<f4").tobytes())
        elif isinstance(layer, SquaredDistance):
            chunks.append(layer.templates.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.debug("Wrote %d layers to %s", len(layers), path)


def load_layers(path: Union[str, Path]) -> List[Layer]:
    """Read an HLW1 file; payloads are widened to float64"""
    raw = Path(path).read_bytes()
    split = raw.find(b"\n\n")
    if split < 0:
        raise ModelFormatError(f"{path}: missing blank line after header")
    lines = raw[:split].decode("ascii").split("\n")
    if lines[0] != HLW_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {lines[0]!r}")
    payload = memoryview(raw)[split + 2:]
    offset = 0

    def take(count: int, shape: Tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        if offset + 4 * count > len(payload):
            raise ModelFormatError(f"{path}: payload truncated")
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return values.astype(np.float64).reshape(shape)

    layers: List[Layer] = []
    for line in lines[1:]:
        parts = line.split()
        try:
            if parts[0] == "linear":
                out, inp, has_bias = int(parts[1]), int(parts[2]), parts[3] == "1"
                weights = take(out * inp, (out, inp))
                bias = take(out, (out,)) if has_bias else None
                layers.append(Linear(weights, bias))
            elif parts[0] == "relu":
                layers.append(ReLU())
            elif parts[0] == "sqdist":
                count, inp = int(parts[1]), int(parts[2])
                layers.append(SquaredDistance(take(count * inp, (count, inp))))
            elif parts[0] == "neglse":
                layers.append(NegLogSumExp(float(parts[1])))
            elif parts[0] == "avgpool":
                layers.append(AveragePool(int(parts[1])))
            else:
                raise ModelFormatError(f"{path}: unknown layer line {line!r}")
        except (IndexError, ValueError) as e:
            if isinstance(e, ModelFormatError):
                raise
            raise ModelFormatError(f"{path}: malformed layer line {line!r}: {e}") from e
    if offset != len(payload):
        raise ModelFormatError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return layers
