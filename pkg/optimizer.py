# ==================================================
# File: optimizer.py
# Adam with decoupled weight decay over named parameter sets
# ==================================================

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from autodiff import ParameterSet
from errors import ConfigError, DimensionError
from pipeline_config import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Adam; weight decay is applied to the parameter, not folded into the gradient.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)

    Parameters named in ``no_decay`` skip the decay term.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 no_decay: Iterable[str] = ()):
        if lr <= 0:
            raise ConfigError(f"Invalid learning rate: {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"Invalid betas: ({beta1}, {beta2})")
        if eps <= 0 or weight_decay < 0:
            raise ConfigError(f"Invalid eps/weight_decay: {eps}, {weight_decay}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        self.state: Dict[str, AdamMoments] = {}

    @classmethod
    def from_config(cls, config: TrainConfig, no_decay: Iterable[str] = ()) -> "Adam":
        return cls(config.lr, config.beta1, config.beta2, config.adam_eps,
                   config.weight_decay, no_decay)

    def step(self, param_sets: Sequence[ParameterSet], grads: Mapping[str, Optional[np.ndarray]]) -> List[str]:
        """Update trainable parameters that received a gradient; returns their names"""
        updated = []
        for params in param_sets:
            for name in params:
                if not params.trainable[name]:
                    continue
                grad = grads.get(name)
                if grad is None:
                    continue
                current = params.arrays[name]
                if grad.shape != current.shape:
                    raise DimensionError(f"gradient of {name}", grad.shape, current.shape)
                params.replace(name, self._update(name, current, grad))
                updated.append(name)
        return updated

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        dtype = param.dtype
        grad = grad.astype(dtype, copy=False)
        state = self.state.get(name)
        if state is None:
            state = AdamMoments(np.zeros_like(param), np.zeros_like(param))
            self.state[name] = state

        state.step += 1
        state.m = (self.beta1 * state.m + (1.0 - self.beta1) * grad).astype(dtype)
        state.v = (self.beta2 * state.v + (1.0 - self.beta2) * grad * grad).astype(dtype)

        bias_correction1 = 1.0 - self.beta1 ** state.step
        bias_correction2 = 1.0 - self.beta2 ** state.step
        m_hat = state.m / bias_correction1
        v_hat = state.v / bias_correction2

        delta = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay and name not in self.no_decay:
            delta = delta + self.weight_decay * param
        return (param - self.lr * delta).astype(dtype)

    def state_arrays(self) -> Dict[str, AdamMoments]:
        return {name: AdamMoments(s.m.copy(), s.v.copy(), s.step) for name, s in self.state.items()}

    def load_state(self, state: Mapping[str, AdamMoments]):
        self.state = {name: AdamMoments(s.m.copy(), s.v.copy(), int(s.step)) for name, s in state.items()}
