"""Coordinate network: Fourier-feature encoding followed by a sine MLP.

The network maps a normalised coordinate ``v = (t, kx, ky, c)`` to a complex
k-space value. All arithmetic is real; the final linear layer emits two
channels read as real and imaginary parts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}
ROW_BLOCK = 64


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``depth`` counts weight layers including the linear output layer, so
    ``depth=8`` means seven sine layers. ``feature_scale`` is either one
    number or one value per coordinate axis.
    """

    depth: int = 5
    width: int = 128
    n_features: int = 128
    omega0: float = 30.0
    omega_hidden: float = 1.0
    feature_scale: tuple = (1.0, 1.0, 1.0, 1.0)
    encoder_seed: int = 0
    precision: str = "float64"
    output_scale: float = 1.0

    def __post_init__(self):
        scale = self.feature_scale
        if np.isscalar(scale):
            scale = (float(scale),) * 4
        scale = tuple(float(s) for s in scale)
        object.__setattr__(self, "feature_scale", scale)
        if len(scale) != 4 or min(scale) <= 0:
            raise ValueError("feature_scale needs four positive entries (or one scalar)")
        if self.depth < 1 or self.width < 1 or self.n_features < 1:
            raise ValueError("depth, width and n_features must be >= 1")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]


FULL_SCALE = ModelConfig(depth=8, width=512)


@dataclass
class FourierFeatureEncoder:
    B: np.ndarray
    scale: np.ndarray

    @classmethod
    def create(cls, n_features: int, seed: int, scale=(1.0, 1.0, 1.0, 1.0)) -> "FourierFeatureEncoder":
        B = np.random.default_rng(seed).standard_normal((n_features, 4))
        return cls(B=B, scale=np.broadcast_to(np.asarray(scale, dtype=float), (4,)).copy())

    @property
    def n_features(self) -> int:
        return self.B.shape[0]

    def projection(self, dtype=np.float64) -> np.ndarray:
        """``2 pi * B * diag(scale)``, shape ``(m, 4)``."""
        return (2 * np.pi * self.B * self.scale[None, :]).astype(dtype)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.B).tobytes() + self.scale.tobytes()).hexdigest()


def encode(encoder: FourierFeatureEncoder, v, dtype=np.float64) -> np.ndarray:
    """``[cos(2 pi s B v), sin(2 pi s B v)]`` for one coordinate or a batch."""
    v = np.asarray(v, dtype=dtype)
    proj = v @ encoder.projection(dtype).T
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


@dataclass
class NikModel:
    config: ModelConfig
    encoder: FourierFeatureEncoder
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def omegas(self):
        n_hidden = len(self.weights) - 1
        return [self.config.omega0] + [self.config.omega_hidden] * (n_hidden - 1) if n_hidden else []

    def parameters(self):
        """Trainable arrays in a fixed order: W1, b1, W2, b2, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def with_parameters(self, params) -> "NikModel":
        params = list(params)
        return NikModel(self.config, self.encoder, weights=params[0::2], biases=params[1::2])

    def copy(self) -> "NikModel":
        return self.with_parameters([p.copy() for p in self.parameters()])

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def weight_bounds(config: ModelConfig):
    """Half-width of the uniform init range for each weight layer."""
    fan_ins = [2 * config.n_features] + [config.width] * (config.depth - 1)
    bounds = []
    for layer, fan_in in enumerate(fan_ins):
        if layer == 0 and config.depth > 1:
            bounds.append(1.0 / fan_in)
        else:
            bounds.append(np.sqrt(6.0 / fan_in) / config.omega_hidden)
    return bounds


def init_model(seed: int, config: ModelConfig = ModelConfig()) -> NikModel:
    """Sine-network initialisation with zero biases.

    The first sine layer draws ``U(-1/fan_in, 1/fan_in)`` and is scaled by
    ``omega0`` inside the activation; later layers draw
    ``U(-sqrt(6/fan_in)/omega_h, +sqrt(6/fan_in)/omega_h)``.
    The encoder matrix uses its own seed so it can be held fixed while the
    weights are re-drawn.
    """
    encoder = FourierFeatureEncoder.create(config.n_features, config.encoder_seed, config.feature_scale)
    rng = np.random.default_rng(seed)
    dims = [2 * config.n_features] + [config.width] * (config.depth - 1) + [2]
    weights, biases = [], []
    for layer, bound in enumerate(weight_bounds(config)):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(config.dtype))
        biases.append(np.zeros(fan_out, dtype=config.dtype))
    return NikModel(config, encoder, weights, biases)


@dataclass
class ForwardCache:
    features: np.ndarray
    activations: list  # input to each weight layer, starting with the features
    preacts: list  # omega * (W h + b) for every sine layer
    output: np.ndarray  # (P, 2)


def forward_batch(model: NikModel, v, cache: bool = False):
    """Evaluate the network on an ``(P, 4)`` batch.

    Rows are zero-padded to a multiple of ``ROW_BLOCK`` so every matrix
    product takes the same BLAS path; a row's output is then bitwise the
    same whether it is evaluated alone or inside a larger batch.

    Returns the complex predictions, plus a :class:`ForwardCache` when
    ``cache`` is true.
    """
    dtype = model.config.dtype
    v = np.atleast_2d(np.asarray(v, dtype=dtype))
    n = v.shape[0]
    pad = -n % ROW_BLOCK
    if pad:
        v = np.concatenate([v, np.zeros((pad, v.shape[1]), dtype=dtype)])
    h = encode(model.encoder, v, dtype)
    acts, pre = [h], []
    for W, b, omega in zip(model.weights[:-1], model.biases[:-1], model.omegas):
        z = h @ W.T
        z += b
        if omega != 1.0:
            z *= omega
        pre.append(z)
        h = np.sin(z)
        acts.append(h)
    out = h @ model.weights[-1].T + model.biases[-1]
    if model.config.output_scale != 1.0:
        out *= model.config.output_scale
    if pad:
        out = out[:n]
        acts = [a[:n] for a in acts]
        pre = [z[:n] for z in pre]
    pred = out[:, 0] + 1j * out[:, 1]
    if cache:
        return pred, ForwardCache(acts[0], acts, pre, out)
    return pred


def forward(model: NikModel, v) -> complex:
    """Single-coordinate forward pass."""
    return complex(forward_batch(model, np.asarray(v).reshape(1, 4))[0])


def backward_from_output(model: NikModel, cache: ForwardCache, grad_out: np.ndarray):
    """Reverse pass given ``dL/d(output)`` of shape ``(P, 2)``.

    Returns gradients in :meth:`NikModel.parameters` order.
    """
    n_layers = len(model.weights)
    if len(cache.activations) != n_layers or len(cache.preacts) != n_layers - 1:
        raise ValueError("forward cache does not match the model depth")
    if grad_out.shape != (cache.output.shape[0], 2):
        raise ValueError(f"grad_out has shape {grad_out.shape}, expected {(cache.output.shape[0], 2)}")
    grads = [None] * (2 * n_layers)
    g = grad_out.astype(model.config.dtype, copy=False)
    if model.config.output_scale != 1.0:
        g = g * model.config.output_scale
    omegas = model.omegas
    for layer in range(n_layers - 1, -1, -1):
        h_in = cache.activations[layer]
        grads[2 * layer] = g.T @ h_in
        grads[2 * layer + 1] = g.sum(axis=0)
        if layer == 0:
            break
        g = g @ model.weights[layer]
        g *= np.cos(cache.preacts[layer - 1])
        omega = omegas[layer - 1]
        if omega != 1.0:
            g *= omega
    return grads
