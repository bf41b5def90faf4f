"""
SGD and Adam over a ParamSet
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON
from utils.autodiff import GradientError

SGD = "sgd"
ADAM = "adam"


@dataclass
class OptimizerState:
    """Optimizer hyperparameters plus per-parameter moment buffers (Adam only)"""
    kind: str
    learning_rate: float
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_epsilon: float = ADAM_EPSILON
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def init_optimizer_state(kind, learning_rate, params, trainable: Optional[Iterable[str]] = None):
    """
    Create optimizer state for `params`.

    Args:
        kind: 'sgd' or 'adam'
        learning_rate: step size (>= 0)
        params: ParamSet being optimized
        trainable: parameter names to update; None means all of them

    Returns:
        OptimizerState: moment buffers allocated for Adam, empty for SGD
    """
    kind = kind.lower()
    if kind not in (SGD, ADAM):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if learning_rate < 0:
        raise ValueError(f"learning rate must be non-negative, got {learning_rate}")
    state = OptimizerState(kind=kind, learning_rate=float(learning_rate))
    if kind == ADAM:
        names = list(trainable) if trainable is not None else params.names()
        for name in names:
            data = params[name].data
            state.first_moment[name] = np.zeros_like(data)
            state.second_moment[name] = np.zeros_like(data)
    return state


def optimizer_step(params, state, trainable: Optional[Iterable[str]] = None):
    """
    Apply one update in place and return `params`.

    SGD: p <- p - lr * g. Adam: bias-corrected moment update.
    Every updated parameter must carry a gradient.
    """
    names = list(trainable) if trainable is not None else params.names()
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise GradientError(f"missing gradient for parameters: {', '.join(missing)}")

    lr = state.learning_rate
    if state.kind == SGD:
        for name in names:
            tensor = params[name]
            tensor.data -= (lr * tensor.grad).astype(tensor.data.dtype)
        state.step_count += 1
        return params

    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.adam_beta1, state.adam_beta2, state.adam_epsilon
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name in names:
        tensor = params[name]
        grad = tensor.grad
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(tensor.data)
            state.second_moment[name] = np.zeros_like(tensor.data)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.data.dtype)
    return params
