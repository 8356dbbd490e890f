"""Internal feature normalization with four grouping kinds.

The grouping set determines which axes the statistics run over:
batch (N,H,W per channel), instance (H,W per sample/channel),
layer (C,H,W per sample) and group (C/G channels,H,W per sample).
Scale/shift and running statistics live in a NormScope so each
modality can keep its own copy while convolution kernels are shared.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("batch", "instance", "layer", "group")


@dataclass
class NormSpec:
    kind: str
    channels: int
    groups: int = 2
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0.0 < self.momentum < 1.0):
            raise ValueError("momentum must lie in (0, 1)")
        if self.kind == "group" and self.channels % self.groups != 0:
            raise ValueError(f"group norm needs channels divisible by G "
                             f"({self.channels} % {self.groups} != 0)")


@dataclass
class NormScope:
    """Trainable affine plus (batch kind only) running statistics for one modality."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    modality: str = "shared"

    def trainables(self):
        return {"gamma": self.gamma, "beta": self.beta}


def make_scope(spec: NormSpec, modality: str = "shared") -> NormScope:
    c = spec.channels
    scope = NormScope(gamma=Tensor(np.ones(c), requires_grad=True),
                      beta=Tensor(np.zeros(c), requires_grad=True),
                      modality=modality)
    if spec.kind == "batch":
        scope.running_mean = np.zeros(c)
        scope.running_var = np.ones(c)
    return scope


def update_running_stats(scope: NormScope, batch_mean: np.ndarray,
                         batch_var: np.ndarray, momentum: float) -> None:
    """running <- (1 - momentum) * running + momentum * batch, elementwise."""
    if scope.running_mean is None:
        raise ValueError("running statistics only exist for the batch kind")
    if not (0.0 < momentum < 1.0):
        raise ValueError("momentum must lie in (0, 1)")
    scope.running_mean *= (1.0 - momentum)
    scope.running_mean += momentum * np.asarray(batch_mean).reshape(-1)
    scope.running_var *= (1.0 - momentum)
    scope.running_var += momentum * np.asarray(batch_var).reshape(-1)


def norm_forward(x: Tensor, spec: NormSpec, scope: NormScope, mode: str = "train") -> Tensor:
    """Standardize over the grouping set, then apply the trainable affine.

    In train mode the batch kind also updates the scope's running
    statistics (detached); in eval mode it normalizes with them.
    The other kinds are mode-independent.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if c != spec.channels:
        raise ValueError(f"channel mismatch: input has {c}, spec expects {spec.channels}")
    eps = spec.epsilon
    gamma = scope.gamma.reshape((1, c, 1, 1))
    beta = scope.beta.reshape((1, c, 1, 1))

    if spec.kind == "batch":
        if mode == "train":
            if n < 2:
                raise ValueError("batch normalization needs batch extent >= 2 in train mode")
            xhat, bmean, bvar = T.standardize(x, (0, 2, 3), eps)
            update_running_stats(scope, bmean.reshape(-1), bvar.reshape(-1), spec.momentum)
        else:
            rm = scope.running_mean[None, :, None, None]
            rv = scope.running_var[None, :, None, None]
            xhat = (x - Tensor(rm)) / Tensor(np.sqrt(rv + eps))
        return gamma * xhat + beta

    if spec.kind == "instance":
        xhat, _m, _v = T.standardize(x, (2, 3), eps)
    elif spec.kind == "layer":
        xhat, _m, _v = T.standardize(x, (1, 2, 3), eps)
    else:  # group
        xr = x.reshape((n, spec.groups, c // spec.groups, h, w))
        xg, _m, _v = T.standardize(xr, (2, 3, 4), eps)
        xhat = xg.reshape((n, c, h, w))
    return gamma * xhat + beta
