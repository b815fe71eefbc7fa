"""Gradient transforms applied between backward pass and optimizer step.

The z-score transform rescales each parameter tensor's gradient to zero mean
and (approximately) unit standard deviation:

    g_hat = (g - mean(g)) / (std(g) + epsilon)

with mean/std taken over all elements of that one tensor, population
convention. Baselines: mean-only centralization, global-norm clipping, and
identity. Exactly one transform runs per training step; transforms never
compose. All functions return fresh arrays and leave their inputs intact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, l2_norm, reduce_stats

KINDS = ("identity", "znorm", "clip-global-norm", "centralize")

# config-file spellings -> canonical kind
KIND_ALIASES = {"identity": "identity", "znorm": "znorm", "clip": "clip-global-norm",
                "centralize": "centralize"}


class NonFiniteGradientError(ValueError):
    """A gradient tensor contains NaN or Inf; carries the parameter path."""

    def __init__(self, path: str):
        super().__init__(f"non-finite gradient in {path!r}")
        self.path = path


@dataclass(frozen=True)
class GradTransformSpec:
    kind: str = "identity"
    epsilon: float = 1e-8
    clip_threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.clip_threshold > 0:
            raise ValueError(f"clip_threshold must be positive, got {self.clip_threshold}")


_warned_degenerate = False


def reset_run_warnings() -> None:
    """Re-arm once-per-run warnings; called at the start of each run."""
    global _warned_degenerate
    _warned_degenerate = False


def _check_finite(g: Tensor, path: str) -> None:
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(path)


def znorm(g: Tensor, epsilon: float = 1e-8, path: str = "<gradient>") -> Tensor:
    """Z-score the gradient tensor over all its elements.

    Single-element tensors have no scale to standardize and pass through
    unchanged (warned once per run). A constant tensor maps to exact zeros:
    its deviations are zero and the division by epsilon keeps them there.
    """
    global _warned_degenerate
    if g.size == 0:
        raise ValueError(f"znorm on empty tensor {path!r}")
    _check_finite(g, path)
    if g.size == 1:
        if not _warned_degenerate:
            _warned_degenerate = True
            warnings.warn(
                f"znorm: single-element tensor {path!r} left unchanged (degenerate z-score)",
                stacklevel=2,
            )
        return g.copy()
    mean, std = reduce_stats(g)
    return ((g - g.dtype.type(mean)) / g.dtype.type(std + epsilon)).astype(g.dtype, copy=False)


def centralize(g: Tensor, path: str = "<gradient>") -> Tensor:
    """Subtract the tensor-wide mean (scale left untouched)."""
    if g.size == 0:
        raise ValueError(f"centralize on empty tensor {path!r}")
    _check_finite(g, path)
    mean, _ = reduce_stats(g)
    return (g - g.dtype.type(mean)).astype(g.dtype, copy=False)


def clip_global_norm(grads: dict[str, Tensor], threshold: float) -> dict[str, Tensor]:
    """Rescale all tensors jointly so their concatenated norm is <= threshold."""
    if not threshold > 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    for path, g in grads.items():
        _check_finite(g, path)
    total = np.sqrt(sum(l2_norm(g) ** 2 for g in grads.values()))
    if total > threshold:
        scale = threshold / total
        return {path: (g * g.dtype.type(scale)) for path, g in grads.items()}
    return {path: g.copy() for path, g in grads.items()}


def global_norm(grads: dict[str, Tensor]) -> float:
    return float(np.sqrt(sum(l2_norm(g) ** 2 for g in grads.values())))


def apply(spec: GradTransformSpec, grads: dict[str, Tensor]) -> dict[str, Tensor]:
    """Run the configured transform over a gradient map; input left unmodified.

    znorm/centralize act on each parameter tensor independently; clipping is
    a single global rescale; identity copies through.
    """
    if spec.kind == "identity":
        for path, g in grads.items():
            _check_finite(g, path)
        return {path: g.copy() for path, g in grads.items()}
    if spec.kind == "znorm":
        return {path: znorm(g, spec.epsilon, path) for path, g in grads.items()}
    if spec.kind == "centralize":
        return {path: centralize(g, path) for path, g in grads.items()}
    return clip_global_norm(grads, spec.clip_threshold)
