"""
Named parameter storage and the AdamW optimizer.

The store owns every trainable Tensor of a model plus the optimizer moments,
so a checkpoint is just a serialisation of one ParamStore.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from function.compute_tensor.tensor_core import Tensor
from function.errors import DimensionError, StateError

logger = logging.getLogger(__name__)


class ParamStore:
    """Ordered map of named parameters with per-parameter AdamW state."""

    def __init__(self):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.moment1: Dict[str, np.ndarray] = {}
        self.moment2: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise StateError(f"parameter {name!r} already registered")
        tensor = Tensor(value, requires_grad=True, name=name)
        self.entries[name] = tensor
        self.moment1[name] = np.zeros_like(tensor.data)
        self.moment2[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, prefix: Optional[str] = None) -> List[str]:
        if prefix is None:
            return list(self.entries)
        return [n for n in self.entries if n.startswith(prefix)]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.entries.values()))

    def zero_grad(self) -> None:
        for tensor in self.entries.values():
            tensor.zero_grad()

    def clear_grad(self) -> None:
        for tensor in self.entries.values():
            tensor.grad = None

    def reset_optimizer(self) -> None:
        """Fresh moments and step counter (start of a training stage)."""
        for name, tensor in self.entries.items():
            self.moment1[name] = np.zeros_like(tensor.data)
            self.moment2[name] = np.zeros_like(tensor.data)
        self.step_count = 0

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.entries.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.entries:
                raise StateError(f"unknown parameter {name!r}")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.entries[name].shape:
                raise DimensionError(
                    f"parameter {name!r} expects {self.entries[name].shape}, got {value.shape}")
            self.entries[name].data[...] = value


def adamw_step(params: ParamStore, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 0.01, eps: float = 1e-8,
               names: Optional[Iterable[str]] = None) -> ParamStore:
    """
    One AdamW update with decoupled weight decay, applied in place.

    ``names`` restricts the update to a subset (frozen parameters keep their
    values and moments); the step counter advances once per call either way.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    selected = list(names) if names is not None else params.names()
    for name in selected:
        if params[name].grad is None:
            raise StateError(f"missing gradient for parameter {name!r}")

    beta1, beta2 = betas
    params.step_count += 1
    t = params.step_count
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t

    for name in selected:
        tensor = params[name]
        g = tensor.grad
        m = params.moment1[name]
        v = params.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.data *= (1.0 - lr * weight_decay)
        tensor.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return params


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` to 0 over ``total_steps`` optimizer steps."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
