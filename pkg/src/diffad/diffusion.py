"""Noise schedule, forward corruption, training step, and reverse sampler.

Training draws one (t, eps) pair per window and takes a single Adam step
on the mean squared noise-prediction error.  Sampling runs the full
t = T..1 reverse loop, either from a noised copy of the original window
(reconstruction) or from pure noise conditioned on an observed history
(forecasting).  Everything is pure given the model, inputs, and an
explicit numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd
from .denoiser import ModelParams, denoiser_forward
from .errors import NumericError
from .optim import AdamState, adam_step


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def build_linear_schedule(T: int, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule inclusive of both endpoints.

    sigma_t is fixed to sqrt(beta_t); recorded in checkpoints so a run
    can be reproduced exactly.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _gather(arr: np.ndarray, t, ndim: int) -> np.ndarray:
    """Pick per-window schedule entries for 1-based steps t, shaped for broadcasting."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > len(arr)):
        raise ValueError(f"step index out of range 1..{len(arr)}")
    vals = arr[t - 1]
    if vals.ndim == 0:
        return vals
    return vals.reshape(vals.shape + (1,) * (ndim - 1))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t in 1..T (per window or scalar)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape}, eps {eps.shape}")
    ab = _gather(schedule.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class DiffusionMode:
    tag: str
    history_length: int = 0

    def __post_init__(self):
        if self.tag not in ("reconstruction", "forecasting"):
            raise ValueError(f"unknown mode tag '{self.tag}'")
        if self.tag == "forecasting" and self.history_length <= 0:
            raise ValueError("forecasting requires history_length > 0")
        if self.tag == "reconstruction" and self.history_length != 0:
            raise ValueError("reconstruction takes no history")


RECONSTRUCTION = DiffusionMode("reconstruction")


@dataclass
class TrainStepResult:
    loss: float
    model: ModelParams
    opt_state: AdamState
    t: np.ndarray = field(repr=False)
    eps: np.ndarray = field(repr=False)
    eps_hat: np.ndarray = field(repr=False)


def training_step(model: ModelParams, batch, schedule: NoiseSchedule,
                  rng: np.random.Generator, opt_state: AdamState) -> TrainStepResult:
    """One noise-prediction step: sample (t, eps) per window, Adam-update theta.

    ``batch`` needs ``.data`` (B,C,L); optional ``.context``/``.mask`` switch
    on forecasting-style training, where the observed region stays clean and
    the loss covers only the target region.
    """
    x0 = np.asarray(batch.data, dtype=np.float64)
    if x0.ndim != 3:
        raise ValueError(f"batch data must be (B,C,L), got {x0.shape}")
    B, C, L = x0.shape
    if C != model.config.features or L != model.config.window:
        raise ValueError(
            f"batch shape {x0.shape[1:]} does not match model input "
            f"({model.config.features}, {model.config.window})"
        )

    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, eps, schedule)

    context = getattr(batch, "context", None)
    mask = getattr(batch, "mask", None)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)[:, None, :]
        x_t = m * x0 + (1.0 - m) * x_t

    params = {k: nd.Tensor(v) for k, v in model.params.items()}
    eps_hat = denoiser_forward(model, x_t, t, context=context, mask=mask,
                               param_override=params)

    err = (eps_hat - nd.Tensor(eps)) ** 2
    if mask is not None:
        w = np.broadcast_to(1.0 - m, x0.shape)
        loss = nd.tsum(err * nd.Tensor(w)) / float(w.sum())
        per_window = ((eps_hat.data - eps) ** 2 * w).sum(axis=(1, 2))
    else:
        loss = nd.tmean(err)
        per_window = ((eps_hat.data - eps) ** 2).mean(axis=(1, 2))

    if not np.isfinite(loss.data):
        bad = int(np.flatnonzero(~np.isfinite(per_window))[0]) if np.any(
            ~np.isfinite(per_window)) else 0
        raise NumericError(f"non-finite training loss (batch index {bad})")

    grads = nd.gradient_of_scalar(loss, params)
    new_params, new_state = adam_step(model.params, grads, opt_state)
    new_model = ModelParams(config=model.config, params=new_params)
    return TrainStepResult(loss=float(loss.data), model=new_model,
                           opt_state=new_state, t=t, eps=eps,
                           eps_hat=eps_hat.data)


def reverse_step(model: ModelParams, x_t: np.ndarray, t: int, context,
                 schedule: NoiseSchedule, z: np.ndarray, mask=None) -> np.ndarray:
    """One reverse update:

    x_{t-1} = (x_t - (1-a_t)/sqrt(1-abar_t) * eps_theta(x_t, t, context)) / sqrt(a_t)
              + sigma_t * z
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    z = np.asarray(z, dtype=np.float64)
    if t == 1 and np.any(z != 0.0):
        raise ValueError("z must be zero at t=1")

    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = denoiser_forward(model, x_t, t, context=context, mask=mask)
    a_t = schedule.alpha[t - 1]
    ab_t = schedule.alpha_bar[t - 1]
    coef = (1.0 - a_t) / np.sqrt(1.0 - ab_t)
    return (x_t - coef * eps_hat) / np.sqrt(a_t) + schedule.sigma[t - 1] * z


def sample(model: ModelParams, mode: DiffusionMode, x: np.ndarray,
           schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Run the full reverse loop and return generated windows (B,C,L).

    Reconstruction: ``x`` is the original window batch (B,C,L); it is
    noised to x_T with a zero context.  Forecasting: ``x`` is the
    observed history (B,C,h); x_T is drawn from N(0,I), the context
    carries the history plus an observed-mask channel, and the first h
    steps are clamped to the history at every step of the loop.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B = x.shape[0]
    C, L = model.config.features, model.config.window

    if mode.tag == "reconstruction":
        if x.shape[1:] != (C, L):
            raise ValueError(f"expected windows (*,{C},{L}), got {x.shape}")
        eps = rng.standard_normal(x.shape)
        x_hat = forward_noise(x, schedule.T, eps, schedule)
        context = None
        mask = None
        history = None
    else:
        h = mode.history_length
        if not 0 < h < L:
            raise ValueError(f"history length {h} outside 1..{L - 1}")
        if x.shape[1:] != (C, h):
            raise ValueError(f"expected history (*,{C},{h}), got {x.shape}")
        history = x
        context = np.zeros((B, C, L))
        context[:, :, :h] = history
        mask = np.zeros((B, L))
        mask[:, :h] = 1.0
        x_hat = rng.standard_normal((B, C, L))
        x_hat[:, :, :h] = history

    for t in range(schedule.T, 0, -1):
        z = rng.standard_normal(x_hat.shape) if t > 1 else np.zeros_like(x_hat)
        x_hat = reverse_step(model, x_hat, t, context, schedule, z, mask=mask)
        if history is not None:
            x_hat[:, :, : mode.history_length] = history
    return x_hat
