"""Channel-wise feature transform: per-channel scale/shift pairs.

The transform starts as the exact identity (scale 1, shift 0), so a
freshly inserted module leaves a trained network's behavior untouched;
adaptation then moves only these 2C scalars per insertion site.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, channel_affine
from .errors import DimensionError


@dataclass
class FTMParams:
    """Trainable per-channel (gamma, beta) pair hosted at one insertion site."""

    gamma: Tensor
    beta: Tensor
    layer_id: str = ""

    @property
    def channels(self) -> int:
        return self.gamma.size

    @property
    def num_params(self) -> int:
        return 2 * self.channels


def ftm_init(channels: int, layer_id: str = "", dtype=np.float32) -> FTMParams:
    """Identity-initialized transform: gamma = 1-vector, beta = 0-vector."""
    if channels < 1:
        raise DimensionError(f"channel transform needs channels >= 1, got {channels}")
    gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    return FTMParams(gamma=gamma, beta=beta, layer_id=layer_id)


def ftm_apply(f: Tensor, params: FTMParams) -> Tensor:
    """Modulate feature maps channel-wise: out[:,c] = gamma[c] * f[:,c] + beta[c].

    Differentiable in f, gamma, and beta; gradients for gamma/beta reduce
    over batch and spatial axes.
    """
    if f.data.ndim != 4 or f.shape[1] != params.channels:
        raise DimensionError(
            f"feature map {f.shape} incompatible with {params.channels}-channel transform"
        )
    return channel_affine(f, params.gamma, params.beta)
