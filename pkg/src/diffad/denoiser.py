"""Noise-prediction networks.

Three interchangeable backbones share a sinusoidal timestep embedding
and a conditioning pathway (context values plus an observed-mask row,
concatenated as extra channels):

* ``ssm``  -- residual blocks of two diagonal state-space layers with the
  conditioning injected between them; the reference backbone.
* ``conv`` -- gated dilated-convolution residual stack.
* ``mlp``  -- flat dense network, mainly for bring-up and ablations.

The state-space layers use a log-decay + frequency parameterization with
ZOH discretization, so the discretized transition magnitude stays below
one no matter what the optimizer does to the raw parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd
from .errors import NumericError
from .nd import Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "ssm"
    features: int = 17
    window: int = 100
    channels: int = 32
    blocks: int = 4
    state_dim: int = 16
    temb_dim: int = 64
    hidden: int = 256
    kernel_width: int = 3

    def __post_init__(self):
        if self.backbone not in ("ssm", "conv", "mlp"):
            raise ValueError(f"unknown backbone '{self.backbone}'")
        for name in ("features", "window", "channels", "blocks", "state_dim",
                     "temb_dim", "hidden", "kernel_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict = field(repr=False)

    @property
    def param_order(self) -> list:
        # insertion order == depth-first architecture order
        return list(self.params.keys())


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding: interleaved sin/cos on a geometric
    frequency ladder from 1 down to 1e-4."""
    if dim % 2 or dim < 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = t[..., None] * freqs
    emb = np.empty(t.shape + (dim,), dtype=np.float64)
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return emb


# --------------------------------------------------------------------------
# diagonal state-space layer


@dataclass
class SsmLayerParams:
    """Per-channel diagonal SSM: H channels, N complex states each."""

    log_decay: np.ndarray  # (H, N); continuous real part is -exp(log_decay)
    freq: np.ndarray       # (H, N)
    b_re: np.ndarray       # (H, N)
    b_im: np.ndarray
    c_re: np.ndarray
    c_im: np.ndarray
    log_step: np.ndarray   # (H,)
    skip: np.ndarray       # (H,)


SSM_FIELDS = ("log_decay", "freq", "b_re", "b_im", "c_re", "c_im",
              "log_step", "skip")


def init_ssm_layer(rng: np.random.Generator, channels: int,
                   state_dim: int) -> SsmLayerParams:
    n = np.arange(state_dim, dtype=np.float64)
    return SsmLayerParams(
        log_decay=np.full((channels, state_dim), np.log(0.5)),
        freq=np.tile(np.pi * n, (channels, 1)),
        b_re=np.ones((channels, state_dim)),
        b_im=np.zeros((channels, state_dim)),
        c_re=rng.normal(scale=0.5 ** 0.5, size=(channels, state_dim)),
        c_im=rng.normal(scale=0.5 ** 0.5, size=(channels, state_dim)),
        log_step=rng.uniform(np.log(0.01), np.log(0.3), size=channels),
        skip=np.ones(channels),
    )


def layer_from_params(params: dict, prefix: str) -> SsmLayerParams:
    return SsmLayerParams(**{f: np.asarray(params[f"{prefix}.{f}"])
                             for f in SSM_FIELDS})


def discretize_zoh(layer: SsmLayerParams):
    """ZOH discretization of the continuous diagonal system.

    Returns (a_bar, b_bar), both complex (H, N):
    a_bar = exp(dt * lam), b_bar = ((a_bar - 1) / lam) * b.
    """
    lam = -np.exp(layer.log_decay) + 1j * layer.freq
    dt = np.exp(layer.log_step)[:, None]
    a_bar = np.exp(dt * lam)
    b = layer.b_re + 1j * layer.b_im
    b_bar = (a_bar - 1.0) / lam * b
    return a_bar, b_bar


def kernel_from_discrete(a_bar, w, L: int) -> np.ndarray:
    """kernel[.., j] = Re(sum_n w * a_bar^j) for j = 0..L-1 (a_bar^0 = 1)."""
    a_bar = np.atleast_2d(np.asarray(a_bar, dtype=np.complex128))
    w = np.atleast_2d(np.asarray(w, dtype=np.complex128))
    powers = a_bar[..., None] ** np.arange(L)
    return np.einsum("hn,hnl->hl", w, powers).real


def ssm_kernel(layer: SsmLayerParams, L: int) -> np.ndarray:
    """Length-L convolution kernel per channel, shape (H, L)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    a_bar, b_bar = discretize_zoh(layer)
    if np.any(np.abs(a_bar) >= 1.0):
        raise ValueError("unstable state: discretized transition magnitude >= 1")
    c = layer.c_re + 1j * layer.c_im
    return kernel_from_discrete(a_bar, c * b_bar, L)


def ssm_recurrence(a_bar, b_bar, c, d, u) -> np.ndarray:
    """Direct state recurrence oracle for the kernel path.

    x_k = a_bar * x_{k-1} + b_bar * u_k (x_{-1} = 0), y_k = Re(c . x_k) + d * u_k,
    so that y equals fft_causal_convolve(u, kernel) + d * u exactly.
    """
    a_bar = np.atleast_2d(np.asarray(a_bar, dtype=np.complex128))
    b_bar = np.atleast_2d(np.asarray(b_bar, dtype=np.complex128))
    c = np.atleast_2d(np.asarray(c, dtype=np.complex128))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (u.shape[0],))
    H, L = u.shape
    state = np.zeros_like(b_bar)
    y = np.empty((H, L))
    for k in range(L):
        state = a_bar * state + b_bar * u[:, k][:, None]
        y[:, k] = (c * state).sum(axis=1).real + d * u[:, k]
    return y


def _ssm_kernel_graph(p: dict, prefix: str, L: int) -> Tensor:
    """Differentiable ZOH kernel in real arithmetic; matches ssm_kernel."""
    log_decay = p[f"{prefix}.log_decay"]
    freq = p[f"{prefix}.freq"]
    H, N = log_decay.shape

    d = nd.exp(log_decay)                        # (H, N), decay > 0
    dt = nd.reshape(nd.exp(p[f"{prefix}.log_step"]), (H, 1))
    dt_re = nd.neg(nd.mul(dt, d))                # Re(dt * lam)
    dt_im = nd.mul(dt, freq)                     # Im(dt * lam)

    mag = nd.exp(dt_re)
    a1_re = nd.mul(mag, nd.cos(dt_im))           # a_bar = exp(dt*lam)
    a1_im = nd.mul(mag, nd.sin(dt_im))

    # b_bar = (a_bar - 1) / lam * b, with lam = -d + i*freq
    denom = nd.add(nd.mul(d, d), nd.mul(freq, freq))
    num_re = nd.sub(a1_re, 1.0)
    num_im = a1_im
    q_re = nd.div(nd.sub(nd.mul(num_im, freq), nd.mul(num_re, d)), denom)
    q_im = nd.div(nd.neg(nd.add(nd.mul(num_im, d), nd.mul(num_re, freq))), denom)
    bb_re = nd.sub(nd.mul(q_re, p[f"{prefix}.b_re"]), nd.mul(q_im, p[f"{prefix}.b_im"]))
    bb_im = nd.add(nd.mul(q_re, p[f"{prefix}.b_im"]), nd.mul(q_im, p[f"{prefix}.b_re"]))

    w_re = nd.sub(nd.mul(p[f"{prefix}.c_re"], bb_re), nd.mul(p[f"{prefix}.c_im"], bb_im))
    w_im = nd.add(nd.mul(p[f"{prefix}.c_re"], bb_im), nd.mul(p[f"{prefix}.c_im"], bb_re))

    j = np.arange(L, dtype=np.float64).reshape(1, 1, L)
    decay3 = nd.exp(nd.mul(nd.reshape(dt_re, (H, N, 1)), j))      # |a_bar|^j
    phase = nd.mul(nd.reshape(dt_im, (H, N, 1)), j)
    re_part = nd.mul(nd.reshape(w_re, (H, N, 1)), nd.cos(phase))
    im_part = nd.mul(nd.reshape(w_im, (H, N, 1)), nd.sin(phase))
    return nd.tsum(nd.mul(decay3, nd.sub(re_part, im_part)), axis=1)


def _ssm_apply(p: dict, prefix: str, x: Tensor, L: int) -> Tensor:
    kernel = _ssm_kernel_graph(p, prefix, L)
    y = nd.fft_causal_convolve(x, kernel)
    skip = nd.reshape(p[f"{prefix}.skip"], (1, -1, 1))
    return nd.add(y, nd.mul(skip, x))


# --------------------------------------------------------------------------
# initialization


def _add_ssm(params: dict, rng, prefix: str, channels: int, state_dim: int):
    layer = init_ssm_layer(rng, channels, state_dim)
    for f in SSM_FIELDS:
        params[f"{prefix}.{f}"] = getattr(layer, f)


def _dense(rng, fan_in: int, fan_out: int, scale: float | None = None):
    s = scale if scale is not None else fan_in ** -0.5
    return rng.normal(scale=s, size=(fan_in, fan_out))


def _conv_w(rng, cout: int, cin: int, k: int, scale: float | None = None):
    s = scale if scale is not None else (cin * k) ** -0.5
    return rng.normal(scale=s, size=(cout, cin, k))


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic parameter initialization from a seed."""
    rng = np.random.default_rng(seed)
    c, h, dt = config.features, config.channels, config.temb_dim
    p: dict = {}

    p["temb.fc1.w"] = _dense(rng, dt, dt)
    p["temb.fc1.b"] = np.zeros(dt)
    p["temb.fc2.w"] = _dense(rng, dt, dt)
    p["temb.fc2.b"] = np.zeros(dt)

    if config.backbone == "mlp":
        cl = c * config.window
        flat = 2 * cl + config.window + dt
        p["fc1.w"] = _dense(rng, flat, config.hidden)
        p["fc1.b"] = np.zeros(config.hidden)
        p["fc2.w"] = _dense(rng, config.hidden, config.hidden)
        p["fc2.b"] = np.zeros(config.hidden)
        p["fc3.w"] = _dense(rng, config.hidden, cl, scale=1e-2)
        p["fc3.b"] = np.zeros(cl)
        return ModelParams(config=config, params=p)

    p["in.w"] = _conv_w(rng, h, c, 1)
    p["in.b"] = np.zeros(h)

    for i in range(config.blocks):
        pre = f"block{i}"
        if config.backbone == "ssm":
            _add_ssm(p, rng, f"{pre}.ssm1", h, config.state_dim)
            p[f"{pre}.temb.w"] = _dense(rng, dt, h)
            p[f"{pre}.temb.b"] = np.zeros(h)
            p[f"{pre}.cond.w"] = _conv_w(rng, h, c + 1, 1)
            p[f"{pre}.cond.b"] = np.zeros(h)
            _add_ssm(p, rng, f"{pre}.ssm2", h, config.state_dim)
            p[f"{pre}.out.w"] = _conv_w(rng, h, h, 1)
            p[f"{pre}.out.b"] = np.zeros(h)
        else:
            k = config.kernel_width
            for half in ("f", "g"):
                p[f"{pre}.dil{half}.w"] = _conv_w(rng, h, h, k)
                p[f"{pre}.dil{half}.b"] = np.zeros(h)
                p[f"{pre}.cond{half}.w"] = _conv_w(rng, h, c + 1, 1)
                p[f"{pre}.cond{half}.b"] = np.zeros(h)
                p[f"{pre}.temb{half}.w"] = _dense(rng, dt, h)
                p[f"{pre}.temb{half}.b"] = np.zeros(h)
            p[f"{pre}.res.w"] = _conv_w(rng, h, h, 1)
            p[f"{pre}.res.b"] = np.zeros(h)
            p[f"{pre}.skip.w"] = _conv_w(rng, h, h, 1)
            p[f"{pre}.skip.b"] = np.zeros(h)

    p["head1.w"] = _conv_w(rng, h, h, 1)
    p["head1.b"] = np.zeros(h)
    p["head2.w"] = _conv_w(rng, c, h, 1, scale=1e-2)
    p["head2.b"] = np.zeros(c)
    return ModelParams(config=config, params=p)


# --------------------------------------------------------------------------
# forward pass


def _bias(t: Tensor) -> Tensor:
    return nd.reshape(t, (1, -1, 1))


def _temb_trunk(p: dict, t: np.ndarray, dim: int) -> Tensor:
    raw = Tensor(time_embedding(t, dim))
    x = nd.silu(nd.add(nd.matmul(raw, p["temb.fc1.w"]), p["temb.fc1.b"]))
    return nd.silu(nd.add(nd.matmul(x, p["temb.fc2.w"]), p["temb.fc2.b"]))


def denoiser_forward(model: ModelParams, x_t, t, context=None, mask=None,
                     param_override: dict | None = None):
    """Predict the noise component of x_t.

    x_t: (B,C,L) or (C,L); t: scalar or (B,) steps in 1..T; context/mask
    optional conditioning (context is zeroed wherever mask is 0 before
    use).  Returns an ndarray matching x_t's shape, or a Tensor when
    param_override supplies graph leaves for training.
    """
    cfg = model.config
    x = np.asarray(x_t, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.features, cfg.window):
        raise ValueError(
            f"input shape {np.asarray(x_t).shape} does not match model "
            f"({cfg.features}, {cfg.window})"
        )
    B, C, L = x.shape

    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))

    if mask is None:
        mask_arr = np.zeros((B, L))
    else:
        mask_arr = np.broadcast_to(np.asarray(mask, dtype=np.float64), (B, L))
    if context is None:
        ctx = np.zeros((B, C, L))
    else:
        ctx = np.broadcast_to(np.asarray(context, dtype=np.float64), (B, C, L))
    ctx = ctx * mask_arr[:, None, :]
    cond = Tensor(np.concatenate([ctx, mask_arr[:, None, :]], axis=1))

    p = param_override if param_override is not None else {
        k: Tensor(v) for k, v in model.params.items()
    }

    temb = _temb_trunk(p, t_arr, cfg.temb_dim)

    if cfg.backbone == "mlp":
        flat = nd.concat(
            [
                nd.reshape(Tensor(x), (B, C * L)),
                temb,
                nd.reshape(Tensor(ctx), (B, C * L)),
                Tensor(mask_arr),
            ],
            axis=1,
        )
        z = nd.tanh(nd.add(nd.matmul(flat, p["fc1.w"]), p["fc1.b"]))
        z = nd.tanh(nd.add(nd.matmul(z, p["fc2.w"]), p["fc2.b"]))
        out = nd.add(nd.matmul(z, p["fc3.w"]), p["fc3.b"])
        out = nd.reshape(out, (B, C, L))
    elif cfg.backbone == "ssm":
        hdn = nd.add(nd.conv1d(Tensor(x), p["in.w"]), _bias(p["in.b"]))
        for i in range(cfg.blocks):
            pre = f"block{i}"
            y = _ssm_apply(p, f"{pre}.ssm1", hdn, L)
            tproj = nd.add(nd.matmul(temb, p[f"{pre}.temb.w"]), p[f"{pre}.temb.b"])
            y = nd.add(y, nd.reshape(tproj, (B, cfg.channels, 1)))
            y = nd.add(y, nd.add(nd.conv1d(cond, p[f"{pre}.cond.w"]),
                                 _bias(p[f"{pre}.cond.b"])))
            y = nd.tanh(y)
            y = _ssm_apply(p, f"{pre}.ssm2", y, L)
            y = nd.relu(y)
            y = nd.add(nd.conv1d(y, p[f"{pre}.out.w"]), _bias(p[f"{pre}.out.b"]))
            hdn = nd.add(hdn, y)
        out = nd.relu(hdn)
        out = nd.relu(nd.add(nd.conv1d(out, p["head1.w"]), _bias(p["head1.b"])))
        out = nd.add(nd.conv1d(out, p["head2.w"]), _bias(p["head2.b"]))
    else:
        hdn = nd.relu(nd.add(nd.conv1d(Tensor(x), p["in.w"]), _bias(p["in.b"])))
        skip_sum = None
        for i in range(cfg.blocks):
            pre = f"block{i}"
            dil = 2 ** i
            halves = {}
            for half in ("f", "g"):
                zz = nd.add(nd.conv1d(hdn, p[f"{pre}.dil{half}.w"], dilation=dil),
                            _bias(p[f"{pre}.dil{half}.b"]))
                zz = nd.add(zz, nd.add(nd.conv1d(cond, p[f"{pre}.cond{half}.w"]),
                                       _bias(p[f"{pre}.cond{half}.b"])))
                tproj = nd.add(nd.matmul(temb, p[f"{pre}.temb{half}.w"]),
                               p[f"{pre}.temb{half}.b"])
                halves[half] = nd.add(zz, nd.reshape(tproj, (B, cfg.channels, 1)))
            z = nd.mul(nd.tanh(halves["f"]), nd.sigmoid(halves["g"]))
            s = nd.add(nd.conv1d(z, p[f"{pre}.skip.w"]), _bias(p[f"{pre}.skip.b"]))
            skip_sum = s if skip_sum is None else nd.add(skip_sum, s)
            r = nd.add(nd.conv1d(z, p[f"{pre}.res.w"]), _bias(p[f"{pre}.res.b"]))
            hdn = nd.add(hdn, r)
        out = nd.relu(skip_sum)
        out = nd.relu(nd.add(nd.conv1d(out, p["head1.w"]), _bias(p["head1.b"])))
        out = nd.add(nd.conv1d(out, p["head2.w"]), _bias(p["head2.b"]))

    if param_override is not None:
        return out

    result = out.data
    if not np.all(np.isfinite(result)):
        raise NumericError("non-finite activation in denoiser forward pass")
    return result[0] if squeeze else result
