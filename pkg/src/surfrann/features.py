"""Randomized hidden layers with closed-form input derivatives.

A layer maps inputs ``x`` (N x d) to features ``psi = tanh(x @ W.T + b)``.
Only the output weights are ever fitted, so every solver in the package
works with the activation values and their derivatives directly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYER_FORMAT = "surfrann.layer/1"


class LayerConfigError(ValueError):
    """Raised when a layer cannot be constructed from the given settings."""


class Activation(enum.Enum):
    TANH = "tanh"

    def derivatives(self, z: np.ndarray, order: int = 2) -> list[np.ndarray]:
        """Return ``[rho, rho', ..., rho^(order)]`` evaluated at ``z``."""
        if order < 0 or order > 3:
            raise ValueError("order must be in 0..3")
        r0 = np.tanh(z)
        out = [r0]
        if order >= 1:
            r1 = 1.0 - r0 * r0
            out.append(r1)
        if order >= 2:
            r2 = -2.0 * r0 * r1
            out.append(r2)
        if order >= 3:
            out.append(-2.0 * r1 * r1 - 2.0 * r0 * r2)
        return out


def make_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for sub-stream ``index`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


@dataclass(frozen=True, eq=False)
class RandomFeatureLayer:
    weights: np.ndarray            # (M, d)
    biases: np.ndarray             # (M,)
    anchors: np.ndarray            # (M, d), the B matrix transposed
    ranges: np.ndarray             # (d,) sampling half-widths r_k
    seed: int = 0
    index: int = 0
    activation: Activation = Activation.TANH
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]


def make_layer(input_dim: int, width: int, r, anchor_box=None, seed: int = 0,
               index: int = 0, anchors=None) -> RandomFeatureLayer:
    """Draw a layer with ``w ~ U(-r_k, r_k)`` per column and anchored biases.

    ``r`` is a scalar or one half-width per input coordinate. Anchors ``B_m``
    are drawn uniformly on ``anchor_box`` (shape ``(d, 2)``) unless explicit
    ``anchors`` (shape ``(width, d)``) are passed. Biases follow
    ``b_m = -sum_k w_mk B_mk`` so that each neuron's transition passes
    through its anchor.
    """
    if input_dim < 1:
        raise LayerConfigError("input_dim must be >= 1")
    if width < 1:
        raise LayerConfigError(f"width must be >= 1, got {width}")
    r = np.broadcast_to(np.asarray(r, dtype=float), (input_dim,)).copy()
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise LayerConfigError(f"r must be finite and positive per coordinate, got {r.tolist()}")

    rng = make_rng(seed, index)
    w = rng.uniform(-r, r, size=(width, input_dim))
    if anchors is not None:
        B = np.asarray(anchors, dtype=float)
        if B.shape != (width, input_dim):
            raise LayerConfigError(f"anchors must have shape {(width, input_dim)}, got {B.shape}")
    else:
        if anchor_box is None:
            raise LayerConfigError("anchor_box or anchors is required")
        box = np.asarray(anchor_box, dtype=float).reshape(input_dim, 2)
        lo, hi = box[:, 0], box[:, 1]
        if np.any(hi < lo) or not np.all(np.isfinite(box)):
            raise LayerConfigError(f"anchor_box is empty or invalid: {box.tolist()}")
        # zero-extent axes are allowed (e.g. a time anchor pinned at 0)
        B = lo + (hi - lo) * rng.random(size=(width, input_dim))
    b = -np.sum(w * B, axis=1)
    return RandomFeatureLayer(weights=w, biases=b, anchors=B, ranges=r,
                              seed=int(seed), index=int(index))


def _check_points(layer: RandomFeatureLayer, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.ndim != 2 or x.shape[1] != layer.input_dim:
        raise ValueError(f"points must have shape (N, {layer.input_dim}), got {x.shape}")
    return x


def preactivation(layer: RandomFeatureLayer, x) -> np.ndarray:
    x = _check_points(layer, x)
    return x @ layer.weights.T + layer.biases


def activations(layer: RandomFeatureLayer, x, order: int = 2) -> list[np.ndarray]:
    """Activation derivative stack ``[rho, rho', ...]``, each of shape (N, M).

    Operator rows are assembled from these and directional products
    ``(a @ W.T)``: a first derivative along ``a`` is ``rho' * (w.a)`` and a
    second derivative along ``(a, c)`` is ``rho'' * (w.a)(w.c)``.
    """
    return layer.activation.derivatives(preactivation(layer, x), order)


@dataclass
class FeatureJet:
    values: np.ndarray   # (N, M)
    grad: np.ndarray     # (N, M, d)
    hess: np.ndarray     # (N, M, d, d)


def eval_jet(layer: RandomFeatureLayer, x) -> FeatureJet:
    """Full per-feature jets. Memory is O(N M d^2); use for small batches."""
    r0, r1, r2 = activations(layer, x, 2)
    W = layer.weights
    grad = r1[:, :, None] * W[None, :, :]
    hess = r2[:, :, None, None] * (W[:, :, None] * W[:, None, :])[None]
    return FeatureJet(values=r0, grad=grad, hess=hess)


def eval_linear_combination(layer: RandomFeatureLayer, coeffs, x):
    """Value, gradient and Hessian of ``u = sum_m c_m psi_m`` at ``x``."""
    c = np.asarray(coeffs, dtype=float)
    if c.shape != (layer.width,):
        raise ValueError(f"coeffs must have length {layer.width}, got shape {c.shape}")
    r0, r1, r2 = activations(layer, x, 2)
    W = layer.weights
    u = r0 @ c
    grad = (r1 * c) @ W
    hess = np.einsum("nm,ma,mb->nab", r2 * c, W, W)
    return u, grad, hess


def save_layer(layer: RandomFeatureLayer, path) -> None:
    np.savez(Path(path), format=LAYER_FORMAT, weights=layer.weights, biases=layer.biases,
             anchors=layer.anchors, ranges=layer.ranges,
             seed=np.int64(layer.seed), index=np.int64(layer.index),
             activation=layer.activation.value)


def load_layer(path) -> RandomFeatureLayer:
    with np.load(Path(path), allow_pickle=False) as z:
        fmt = str(z["format"])
        if fmt != LAYER_FORMAT:
            raise ValueError(f"unsupported layer format {fmt!r}")
        return RandomFeatureLayer(weights=z["weights"], biases=z["biases"], anchors=z["anchors"],
                                  ranges=z["ranges"], seed=int(z["seed"]), index=int(z["index"]),
                                  activation=Activation(str(z["activation"])))
