"""Differentiable binary masks over weight tensors.

Each maskable weight tensor carries a same-shape tensor of logits l. The mask
probability is sigmoid(l). During training a relaxed sample is drawn by
perturbing the logits with logistic noise and squashing at a temperature;
hard 0/1 masks used in the forward pass pass gradients straight through to
the logits. At extraction time the mask is the deterministic l > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

# sigmoid(2.1972) = 0.900, so fresh masks start near fully dense
LOGIT_INIT = 2.1972

# keeps log(u) and log(1 - u) finite for u drawn at the ends of [0, 1)
_U_CLIP = 1e-12


@dataclass
class MaskedParameter:
    """A weight tensor paired with its mask logits (same shape)."""

    name: str
    weights: Tensor
    mask_logits: Tensor

    def __post_init__(self):
        if self.weights.shape != self.mask_logits.shape:
            raise ContractError(
                f"{self.name}: weights shape {self.weights.shape} "
                f"!= mask logits shape {self.mask_logits.shape}"
            )


@dataclass(frozen=True)
class MaskMode:
    """How masks are realized in a forward pass."""

    kind: str
    temperature: float | None = None

    @classmethod
    def stochastic(cls, temperature: float) -> "MaskMode":
        if not temperature > 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        return cls("stochastic", float(temperature))

    @classmethod
    def deterministic(cls) -> "MaskMode":
        return cls("deterministic")


def mask_probability(logits: Tensor) -> Tensor:
    """Per-entry keep probability, differentiable in the logits."""
    return T.sigmoid(logits)


def sample_relaxed_mask(logits: Tensor, temperature: float, rng: np.random.Generator) -> Tensor:
    """Draw a soft mask in (0, 1): sigmoid((l + logistic noise) / temperature).

    One uniform draw per entry. Differentiable in the logits; the noise is a
    constant of the sample.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    u = rng.uniform(size=logits.shape)
    u = np.clip(u, _U_CLIP, 1.0 - _U_CLIP)
    noise = np.log(u) - np.log1p(-u)
    return T.sigmoid(T.scalar_multiply(T.add(logits, Tensor(noise)), 1.0 / temperature))


def binarize_straight_through(relaxed: Tensor) -> Tensor:
    """Threshold a relaxed mask at 0.5 (ties break to 0), gradient = identity."""
    hard = (relaxed.data > 0.5).astype(np.float64)
    return T.apply_primitive(hard, (relaxed,), (lambda g: g,))


def effective_weights(param: MaskedParameter, mode: MaskMode, rng: np.random.Generator | None = None) -> Tensor:
    """Masked weights for one forward pass.

    Stochastic mode samples a fresh hard mask (straight-through); the caller
    supplies the rng and decides how often to resample. Deterministic mode
    applies l > 0 and never touches an rng.
    """
    if mode.kind == "deterministic":
        mask = Tensor((param.mask_logits.data > 0).astype(np.float64))
        return T.multiply(param.weights, mask)
    if mode.kind == "stochastic":
        if rng is None:
            raise ContractError("stochastic masking requires an rng")
        relaxed = sample_relaxed_mask(param.mask_logits, mode.temperature, rng)
        return T.multiply(param.weights, binarize_straight_through(relaxed))
    raise ConfigError(f"unknown mask mode {mode.kind!r}")


def extract_final_mask(param: MaskedParameter) -> np.ndarray:
    """The persisted binary mask: 1 where logit > 0. Idempotent by definition."""
    return (param.mask_logits.data > 0).astype(np.uint8)
