import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from config import config
from errors import NumericalError, TrainingDivergedError
from neural_network import Linear, LayerStack, model_gradient, reconstruction_loss
from random_streams import rng_for

logger = logging.getLogger(__name__)


@dataclass
class TrainingHistory:
    """Per-epoch losses and the epoch whose weights were kept"""
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = float("inf")


class Adam:
    """Adam with bias-corrected moments over a flat list of parameter arrays"""

    def __init__(self, params: List[np.ndarray], step: float = config.ADAM_STEP,
                 beta1: float = config.ADAM_BETA1, beta2: float = config.ADAM_BETA2,
                 epsilon: float = config.ADAM_EPSILON):
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def update(self, params: List[np.ndarray], grads: List[np.ndarray]) -> List[np.ndarray]:
        self.t += 1
        updated = []
        for i, (param, grad) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * grad ** 2
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            updated.append(param - self.step * m_hat / (np.sqrt(v_hat) + self.epsilon))
        return updated


def stack_parameters(stack: LayerStack) -> List[np.ndarray]:
    """Writable copies of every Linear weight and bias, in layer order"""
    params = []
    for layer in stack.layers:
        if isinstance(layer, Linear):
            params.append(np.array(layer.weights))
            if layer.bias is not None:
                params.append(np.array(layer.bias))
    return params


def rebuild_stack(stack: LayerStack, params: List[np.ndarray]) -> LayerStack:
    """Same architecture as stack with the given parameters substituted"""
    values = iter(params)
    layers = []
    for layer in stack.layers:
        if isinstance(layer, Linear):
            weights = next(values)
            bias = next(values) if layer.bias is not None else None
            layers.append(Linear(weights, bias))
        else:
            layers.append(layer)
    return LayerStack(layers, stack.input_dim)


def _flat_gradients(stack: LayerStack, batch: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    result = model_gradient(stack, batch)
    grads = []
    for layer, grad in zip(stack.layers, result.gradients):
        if isinstance(layer, Linear):
            grads.append(grad.weights)
            if layer.bias is not None:
                grads.append(grad.bias)
    return result.loss, grads


def train_reconstruction(network: LayerStack, train: np.ndarray, val: Optional[np.ndarray] = None,
                         epochs: int = config.EPOCHS, batch_size: int = config.BATCH_SIZE,
                         step: float = config.ADAM_STEP, seed: int = 0) -> Tuple[LayerStack, TrainingHistory]:
    """
    Minibatch Adam on the squared reconstruction loss.

    Samples are reshuffled every epoch from a seeded stream. The weights with
    the lowest validation loss (training loss when no validation set is
    given) are returned, including the initial weights.

    Args:
        network: Linear/ReLU stack to train
        train: Training inputs of shape (n, d)
        val: Optional validation inputs of shape (m, d)
        epochs: Number of passes over the training data
        batch_size: Minibatch size
        step: Adam step size
        seed: Run seed for the shuffling stream

    Returns:
        Tuple of (best network, training history)
    """
    train = np.atleast_2d(np.asarray(train, dtype=np.float64))
    monitor = train if val is None or len(val) == 0 else np.atleast_2d(np.asarray(val, dtype=np.float64))
    rng = rng_for(seed, "shuffle")
    history = TrainingHistory()

    params = stack_parameters(network)
    optimizer = Adam(params, step=step)
    best = network
    history.best_loss = reconstruction_loss(network, monitor)

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        current = network
        for start in range(0, len(train), batch_size):
            batch = train[order[start:start + batch_size]]
            try:
                loss, grads = _flat_gradients(current, batch)
            except NumericalError as e:
                raise TrainingDivergedError(epoch, float("nan")) from e
            params = optimizer.update(params, grads)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDivergedError(epoch, loss)
            current = rebuild_stack(network, params)
            epoch_loss += loss * len(batch)
        network = current

        monitored = reconstruction_loss(network, monitor)
        if not np.isfinite(monitored):
            raise TrainingDivergedError(epoch, monitored)
        history.train_loss.append(epoch_loss / len(train))
        history.val_loss.append(monitored)
        if monitored < history.best_loss:
            best, history.best_loss, history.best_epoch = network, monitored, epoch
        logger.debug("epoch %d train %.6g val %.6g", epoch, history.train_loss[-1], monitored)

    logger.info("Training finished: best epoch %d, loss %.6g", history.best_epoch, history.best_loss)
    return best, history
