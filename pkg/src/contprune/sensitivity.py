"""Finite-difference sensitivity of layer outputs to weight and input
perturbations, and the closed-form gradient of the sensitivity loss.

For a layer ``y = f(x, W)`` and small perturbations ``dW``, ``dx``:

    s_w  = f(W + dW, x) - y          output change from the weight side
    s_x  = f(W, x + dx) - y          output change from the input side
    dy   = s_w + s_x                 combined first-order output change
    g    = x                  if f is a bare linear map
         = pinv(dW) @ s_w     otherwise (finite-difference surrogate)
    grad = 2 * dy @ g.T              gradient of ||dy||^2 wrt dW

Vectors are columns: ``x`` is (in_dim, 1), ``y`` and the sensitivities are
(out_dim, 1), and ``grad`` is congruent to the weight (out_dim, in_dim).

For bare linear layers the finite differences collapse algebraically to
``dW @ x`` and ``W @ dx``; those exact forms are used directly, which avoids
the cancellation error of evaluating ``f(W + dW, x) - f(W, x)`` in floating
point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import NumericalError, ShapeError, UsageError
from .model import Layer, layer_forward

DEFAULT_EPSILON = 1e-3


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Scaled random perturbations for one (weight, input) pair.

    delta_w and delta_x are Gaussian, rescaled so that RMS(delta_w) equals
    epsilon * RMS(W) and RMS(delta_x) equals epsilon * RMS(x). A dense
    Gaussian matrix is full-rank almost surely, which the pseudoinverse
    surrogate requires.
    """

    delta_w: np.ndarray | None
    delta_x: np.ndarray | None
    epsilon: float
    seed: int


def scaled_gaussian(shape, target_rms: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian array rescaled to an exact root-mean-square value."""
    g = rng.standard_normal(shape)
    rms = float(np.sqrt(np.mean(g * g)))
    if rms == 0.0 or target_rms == 0.0:
        return np.zeros(shape)
    return g * (target_rms / rms)


def make_perturbation(
    weight: np.ndarray | None,
    x: np.ndarray | None,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
) -> Perturbation:
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    rng = np.random.default_rng(seed)
    delta_w = None
    if weight is not None:
        w = np.asarray(weight, dtype=np.float64)
        delta_w = scaled_gaussian(w.shape, epsilon * float(np.sqrt(np.mean(w * w))), rng)
    delta_x = None
    if x is not None:
        xv = np.asarray(x, dtype=np.float64)
        delta_x = scaled_gaussian(xv.shape, epsilon * float(np.sqrt(np.mean(xv * xv))), rng)
    return Perturbation(delta_w=delta_w, delta_x=delta_x, epsilon=epsilon, seed=seed)


def unit_forward(
    layer: Layer,
    x: np.ndarray,
    weight_override: np.ndarray | None = None,
    post: Layer | None = None,
) -> np.ndarray:
    """Evaluate ``layer`` (optionally fused with a following layer ``post``)."""
    y = layer_forward(layer, x, weight_override=weight_override)
    if post is not None:
        y = layer_forward(post, y)
    return y


def _is_bare_linear(layer: Layer, post: Layer | None) -> bool:
    return layer.kind == "linear" and post is None


def sensitivity_w(
    layer: Layer,
    x: np.ndarray,
    y: np.ndarray,
    pert: Perturbation,
    post: Layer | None = None,
) -> np.ndarray:
    """Output change under the weight perturbation: f(W + dW, x) - y."""
    if layer.weight is None:
        raise UsageError(f"{layer.kind} layer has no weight to perturb")
    if pert.delta_w is None or pert.delta_w.shape != layer.weight.shape:
        raise ShapeError("perturbation delta_w is missing or not congruent to weight")
    if _is_bare_linear(layer, post):
        return pert.delta_w @ x  # exact: (W + dW) x - W x == dW x
    return unit_forward(layer, x, weight_override=layer.weight + pert.delta_w, post=post) - y


def sensitivity_x(
    layer: Layer,
    x: np.ndarray,
    y: np.ndarray,
    pert: Perturbation,
    post: Layer | None = None,
) -> np.ndarray:
    """Output change under the input perturbation: f(W, x + dx) - y."""
    if pert.delta_x is None or pert.delta_x.shape != np.shape(x):
        raise ShapeError("perturbation delta_x is missing or not congruent to input")
    if _is_bare_linear(layer, post):
        return layer.weight @ pert.delta_x  # exact: W (x + dx) - W x == W dx
    return unit_forward(layer, np.asarray(x) + pert.delta_x, post=post) - y


def dfdw_surrogate(
    layer: Layer,
    x: np.ndarray,
    s_w: np.ndarray,
    pert: Perturbation,
    post: Layer | None = None,
) -> np.ndarray:
    """Collapsed weight-derivative of f, shaped like the input ``x``.

    Bare linear layers have the exact value ``x``. Otherwise the surrogate
    is ``pinv(delta_w) @ s_w``, which requires delta_w to be full-rank: a
    rank-deficient perturbation raises NumericalError so the caller can
    regenerate it from a different seed.
    """
    if _is_bare_linear(layer, post):
        return np.asarray(x, dtype=np.float64).copy()
    if pert.delta_w is None:
        raise ShapeError("nonlinear surrogate needs a weight perturbation")
    dw = pert.delta_w
    if linalg.rank(dw) < min(dw.shape):
        raise NumericalError(
            f"delta_w of shape {dw.shape} is rank-deficient; regenerate the "
            f"perturbation with a different seed"
        )
    return linalg.pseudoinverse(dw) @ s_w


def loss_gradient(dy: np.ndarray, dfdw: np.ndarray) -> np.ndarray:
    """Gradient of the squared output change wrt the weight perturbation.

    ``dy`` is (out_dim, 1) and ``dfdw`` is (in_dim, 1); the result is the
    outer product ``2 * dy @ dfdw.T`` of shape (out_dim, in_dim).
    """
    dy = np.asarray(dy, dtype=np.float64)
    dfdw = np.asarray(dfdw, dtype=np.float64)
    if dy.ndim != 2 or dy.shape[1] != 1 or dfdw.ndim != 2 or dfdw.shape[1] != 1:
        raise ShapeError(
            f"loss_gradient expects column vectors, got {dy.shape} and {dfdw.shape}"
        )
    return 2.0 * dy @ dfdw.T


@dataclass(frozen=True, eq=False)
class SensitivityRecord:
    s_w: np.ndarray
    s_x: np.ndarray
    dy: np.ndarray
    dfdw: np.ndarray
    grad: np.ndarray


def record(
    layer: Layer,
    x: np.ndarray,
    y: np.ndarray,
    pert: Perturbation,
    post: Layer | None = None,
) -> SensitivityRecord:
    """Full sensitivity record for one (layer, input) pair."""
    s_w = sensitivity_w(layer, x, y, pert, post=post)
    s_x = sensitivity_x(layer, x, y, pert, post=post)
    dy = s_w + s_x
    dfdw = dfdw_surrogate(layer, x, s_w, pert, post=post)
    grad = loss_gradient(dy, dfdw)
    return SensitivityRecord(s_w=s_w, s_x=s_x, dy=dy, dfdw=dfdw, grad=grad)


def batch_input_perturbation(
    x_batch: np.ndarray, epsilon: float, rng: np.random.Generator
) -> np.ndarray:
    """Per-column input perturbations: RMS(dx_p) = epsilon * RMS(x_p) for each
    column p of ``x_batch``."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    g = rng.standard_normal(x_batch.shape)
    g_rms = np.sqrt(np.mean(g * g, axis=0, keepdims=True))
    x_rms = np.sqrt(np.mean(x_batch * x_batch, axis=0, keepdims=True))
    np.divide(x_rms, g_rms, out=x_rms, where=g_rms > 0)
    return g * (epsilon * x_rms)


def batch_gradient_magnitude(
    layer: Layer,
    x_batch: np.ndarray,
    delta_w: np.ndarray,
    delta_x: np.ndarray,
    post: Layer | None = None,
) -> np.ndarray:
    """Sum over columns p of ``|2 * dy_p @ dfdw_p.T|``, shaped like the weight.

    Equivalent to accumulating one record per column of ``x_batch`` with a
    shared weight perturbation, but computed as a single matrix product of
    absolute values: gradients here are outer products, so the positionwise
    sum of their magnitudes is ``2 |dy| @ |dfdw|.T``.
    """
    if layer.weight is None:
        raise UsageError(f"{layer.kind} layer has no weight to perturb")
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if delta_w.shape != layer.weight.shape or delta_x.shape != x_batch.shape:
        raise ShapeError("perturbations not congruent to weight/input batch")
    if _is_bare_linear(layer, post):
        s_w = delta_w @ x_batch
        s_x = layer.weight @ delta_x
        dfdw = x_batch
    else:
        y = unit_forward(layer, x_batch, post=post)
        s_w = unit_forward(layer, x_batch, weight_override=layer.weight + delta_w, post=post) - y
        s_x = unit_forward(layer, x_batch + delta_x, post=post) - y
        if linalg.rank(delta_w) < min(delta_w.shape):
            raise NumericalError(
                f"delta_w of shape {delta_w.shape} is rank-deficient; regenerate "
                f"the perturbation with a different seed"
            )
        dfdw = linalg.pseudoinverse(delta_w) @ s_w
    dy = s_w + s_x
    return 2.0 * np.abs(dy) @ np.abs(dfdw).T
