"""Linearised high-dynamic-range loss, hand-written gradients and Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import NikModel, backward_from_output, forward_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    eps: float = 100.0
    sigma: float = 1.0
    detach_weight: bool = True
    kernel_exponent: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.kernel_exponent not in (1, 2):
            raise ValueError("kernel_exponent must be 1 or 2")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 50000
    points_per_step: int = 10000
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    log_every: int = 100
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.points_per_step < 1:
            raise ValueError("points_per_step must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


def kernel_weight(v, sigma: float = 1.0, exponent: int = 1):
    """Frequency response of the Gaussian denoiser at ``v``.

    Only the ``(kx, ky)`` components enter the distance ``d``; the result is
    ``exp(-d**exponent / (2 sigma**2))``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    v = np.asarray(v, dtype=float)
    d = np.hypot(v[..., 1], v[..., 2])
    return np.exp(-(d**exponent) / (2 * sigma**2))


@dataclass
class LossTerms:
    total: float
    data_term: float
    reg_term: float
    grad_pred: np.ndarray  # dL/d(Re, Im) of every prediction, shape (P, 2)


def hdr_loss(pred, target, coords, cfg: LossConfig) -> LossTerms:
    """Mean over points of ``|w (p - y)|^2 + lam |w (1 - F) p|^2``.

    ``w = 1 / (|p| + eps)``. With ``cfg.detach_weight`` the weight is held
    constant when forming ``grad_pred``, which is the gradient of the
    linearised log transform at the current prediction.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred and target must be equal-length non-empty 1-D batches")
    for name, arr in (("pred", pred), ("target", target)):
        finite = np.isfinite(arr)
        if not finite.all():
            raise ValueError(f"non-finite {name} value at point index {int(np.argmin(finite))}")
    n = pred.size
    mag = np.abs(pred)
    w2 = 1.0 / (mag + cfg.eps) ** 2
    damp = 1.0 - kernel_weight(coords, cfg.sigma, cfg.kernel_exponent)
    resid = pred - target
    data_pp = w2 * (resid.real**2 + resid.imag**2)
    reg_pp = cfg.lam * w2 * damp**2 * mag**2
    data_term = float(data_pp.sum() / n)
    reg_term = float(reg_pp.sum() / n)

    g = w2 * (resid + cfg.lam * damp**2 * pred)
    if not cfg.detach_weight:
        # d(w^2)/dp = -2 w^3 p / |p|, zero subgradient at p = 0
        w = np.sqrt(w2)
        unit = np.divide(pred, mag, out=np.zeros_like(pred), where=mag > 0)
        g = g - w * (data_pp + reg_pp) * unit
    grad_pred = (2.0 / n) * np.stack([g.real, g.imag], axis=1)
    return LossTerms(data_term + reg_term, data_term, reg_term, grad_pred)


def loss_and_grad(model: NikModel, coords, targets, cfg: LossConfig):
    """Loss terms and gradients for every trainable parameter."""
    pred, cache = forward_batch(model, coords, cache=True)
    terms = hdr_loss(pred, targets, coords, cfg)
    grads = backward_from_output(model, cache, terms.grad_pred)
    return terms, grads


def backward(model: NikModel, coords, targets, cfg: LossConfig):
    """Gradients of :func:`hdr_loss` w.r.t. ``model.parameters()``."""
    return loss_and_grad(model, coords, targets, cfg)[1]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=3e-5, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append((p - state.lr * update).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, replace(state, m=new_m, v=new_v, step=step)


def batch_indices(n_points: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Indices drawn at ``step`` by an epoch-wise shuffled sweep.

    The stream is a concatenation of independent permutations, one per
    epoch, seeded by ``(seed, epoch)``; this makes any step reproducible
    without replaying earlier ones.
    """
    start = step * batch
    stop = start + batch
    out = []
    epoch = start // n_points
    while start < stop:
        perm = np.random.default_rng([seed, epoch]).permutation(n_points)
        lo = start - epoch * n_points
        hi = min(stop - epoch * n_points, n_points)
        out.append(perm[lo:hi])
        start = epoch * n_points + hi
        epoch += 1
    return np.concatenate(out)


@dataclass
class TrainResult:
    model: NikModel
    state: AdamState
    history: list  # (step, data_term, reg_term, total)


def train(
    coords,
    values,
    model: NikModel,
    cfg: TrainConfig,
    state: AdamState | None = None,
    callback=None,
) -> TrainResult:
    """Fit ``model`` to ``(coords, values)`` for ``cfg.steps`` Adam steps.

    Passing the ``state`` returned by a previous call resumes the run: the
    minibatch stream is a function of the global step, so interrupted and
    uninterrupted runs produce identical parameters. ``history`` holds a
    row every ``log_every`` steps plus one for the final parameters.
    """
    coords = np.asarray(coords)
    values = np.asarray(values)
    if len(values) == 0:
        raise ValueError("empty dataset")
    if coords.shape != (len(values), 4):
        raise ValueError(f"coords must have shape (n, 4), got {coords.shape}")
    dtype = model.config.dtype
    coords = coords.astype(dtype)
    targets = values.astype(np.complex64 if dtype == np.float32 else np.complex128)

    params = [p.copy() for p in model.parameters()]
    if state is None:
        state = AdamState.zeros_like(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    else:
        state = replace(state, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps_adam)
    batch = min(cfg.points_per_step, len(values))
    history = []
    current = model.with_parameters(params)
    first = state.step
    for step in range(first, first + cfg.steps):
        idx = batch_indices(len(values), batch, step, cfg.seed)
        terms, grads = loss_and_grad(current, coords[idx], targets[idx], cfg.loss)
        if not np.isfinite(terms.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if step % cfg.log_every == 0:
            history.append((step, terms.data_term, terms.reg_term, terms.total))
            logger.debug("step %d loss %.6g", step, terms.total)
            if callback is not None:
                callback(step, current, terms)
        params, state = adam_step(params, grads, state)
        current = model.with_parameters(params)
    # closing row: loss of the returned parameters on the next scheduled batch
    step = first + cfg.steps
    idx = batch_indices(len(values), batch, step, cfg.seed)
    pred = forward_batch(current, coords[idx])
    terms = hdr_loss(pred, targets[idx], coords[idx], cfg.loss)
    history.append((step, terms.data_term, terms.reg_term, terms.total))
    return TrainResult(current, state, history)
