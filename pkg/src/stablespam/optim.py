"""Optimizer step rules: Stable-SPAM, its components, and baselines.

Stable-SPAM applies, per step and per tensor:

  1. AdaClip  -- elementwise clip against a bias-corrected EMA of the
     historical max-abs gradient entry (coefficient gamma3).
  2. AdaGN    -- rescale the whole gradient matrix by the ratio of the
     bias-corrected EMA of its L2 norm to the sqrt of the bias-corrected
     EMA of its squared norm (coefficients gamma1 / gamma2).
  3. MoRet    -- zero Adam's first/second moments at multiples of the
     reset interval, before that step's moment update.
  4. Adam update with bias correction.

Bias-correction counters: the Adam correction uses ``step_in_cycle`` which
restarts with each MoRet reset (so a constant gradient c keeps m_hat == c
after a reset), while the AdaGN/AdaClip counters are monotone because their
state is never zeroed.

Baselines: SGD, Adam, Adam+GradClip (global threshold clip), Adafactor
(factored second moment with RMS update clipping), SPAM (elementwise
SpikeClip + periodic reset + post-reset linear LR warmup), Lion, and a
simplified Adam-mini that keeps one shared second-moment scalar per tensor.

``compose`` builds an optimizer from an ordered list of gradient transforms
plus a base update rule; Stable-SPAM is exactly
``compose(["adaclip", "adagn"], Adam-with-MoRet)``, bit for bit.

All epsilon divisors are placed as (sqrt(v_hat) + eps), never sqrt(v + eps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import as_matrix, frobenius_norm, max_abs


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Per-tensor state
# ---------------------------------------------------------------------------

@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step_in_cycle: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamMoments":
        return cls(m=np.zeros(shape), v=np.zeros(shape))

    def reset(self) -> None:
        self.m[...] = 0.0
        self.v[...] = 0.0
        self.step_in_cycle = 0


@dataclass
class AdaGnState:
    m_norm: float = 0.0
    v_norm: float = 0.0
    step: int = 0


@dataclass
class AdaClipState:
    t_threshold: float = 0.0
    step: int = 0


@dataclass
class AdamMiniState:
    m: np.ndarray
    v: float = 0.0
    step_in_cycle: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamMiniState":
        return cls(m=np.zeros(shape))


@dataclass
class AdafactorState:
    row: np.ndarray | None = None   # (rows, 1) EMA of row means of g^2
    col: np.ndarray | None = None   # (1, cols) EMA of column means of g^2
    v: np.ndarray | None = None     # unfactored fallback for vectors
    step: int = 0


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass
class StableSpamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    gamma1: float = 0.7
    gamma2: float = 0.9
    gamma3: float = 0.999
    reset_interval: int = 1000
    eps: float = 1e-6


@dataclass
class SpamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    reset_interval: int = 500
    warmup_steps: int = 150
    gss_threshold: float = 5000.0


@dataclass
class AdafactorConfig:
    lr: float = 1e-3
    eps1: float = 1e-30
    eps2: float = 1e-3
    d: float = 1.0
    decay_power: float = 0.8


@dataclass
class StableSpamState:
    moments: AdamMoments
    adagn: AdaGnState = field(default_factory=AdaGnState)
    adaclip: AdaClipState = field(default_factory=AdaClipState)
    last_clipped_fraction: float = 0.0
    last_reset: bool = False

    @classmethod
    def zeros(cls, shape) -> "StableSpamState":
        return cls(moments=AdamMoments.zeros(shape))


# ---------------------------------------------------------------------------
# Gradient transforms
# ---------------------------------------------------------------------------

def _require_finite(g: np.ndarray) -> None:
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")


def adaclip(g, state: AdaClipState, gamma3: float):
    """Clip entries above the bias-corrected EMA of historical g_max.

    Flagged entries are rescaled by T_hat / g_max (sign preserved); returns
    the new gradient and the fraction of entries clipped. State is mutated.
    """
    g = as_matrix(g)
    _require_finite(g)
    t = state.step + 1
    g_max = max_abs(g)
    state.t_threshold = gamma3 * state.t_threshold + (1.0 - gamma3) * g_max
    state.step = t
    t_hat = state.t_threshold / (1.0 - gamma3 ** t)
    mask = np.abs(g) > t_hat
    out = g.copy()
    if mask.any():
        out[mask] = g[mask] / g_max * t_hat
    return out, float(mask.sum() / g.size)


def adagn(g, state: AdaGnState, gamma1: float, gamma2: float, eps: float = 1e-6):
    """Rescale g to the bias-corrected historical-norm ratio.

    The output's Frobenius norm is m_hat / (sqrt(v_hat) + eps). A zero
    gradient is returned unchanged but still updates the norm EMAs.
    """
    g = as_matrix(g)
    _require_finite(g)
    t = state.step + 1
    g_norm = frobenius_norm(g)
    state.m_norm = gamma1 * state.m_norm + (1.0 - gamma1) * g_norm
    state.v_norm = gamma2 * state.v_norm + (1.0 - gamma2) * g_norm * g_norm
    state.step = t
    if g_norm == 0.0:
        return g.copy()
    m_hat = state.m_norm / (1.0 - gamma1 ** t)
    v_hat = state.v_norm / (1.0 - gamma2 ** t)
    return g / g_norm * (m_hat / (math.sqrt(v_hat) + eps))


def spike_clip(g, v, theta: float) -> np.ndarray:
    """SPAM's elementwise spike clip: g_i <- sign(g_i) * sqrt(theta * v_i)
    wherever g_i^2 / v_i > theta. Entries with v_i == 0 are left unchanged."""
    g = as_matrix(g)
    v = as_matrix(v)
    positive = v > 0
    ratio = np.divide(g * g, v, out=np.zeros_like(g), where=positive)
    mask = positive & (ratio > theta)
    out = g.copy()
    if mask.any():
        out[mask] = np.sign(g[mask]) * np.sqrt(theta * v[mask])
    return out


def grad_clip_global(g_layers, threshold: float):
    """Scale all layers by threshold/N when the global norm N exceeds it."""
    if threshold <= 0:
        raise ValueError("grad clip threshold must be positive")
    total = math.sqrt(sum(frobenius_norm(g) ** 2 for g in g_layers))
    if total <= threshold:
        return [as_matrix(g).copy() for g in g_layers]
    factor = threshold / total
    return [as_matrix(g) * factor for g in g_layers]


def moret_reset(moments: AdamMoments, global_step: int, interval: int) -> bool:
    """Zero the moments at multiples of the interval (0 disables)."""
    if interval and global_step % interval == 0:
        moments.reset()
        return True
    return False


# ---------------------------------------------------------------------------
# Step rules
# ---------------------------------------------------------------------------

def adam_step(w, g, moments: AdamMoments, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6):
    w = as_matrix(w)
    g = as_matrix(g)
    _require_finite(g)
    t = moments.step_in_cycle + 1
    moments.step_in_cycle = t
    moments.m[...] = beta1 * moments.m + (1.0 - beta1) * g
    moments.v[...] = beta2 * moments.v + (1.0 - beta2) * (g * g)
    m_hat = moments.m / (1.0 - beta1 ** t)
    v_hat = moments.v / (1.0 - beta2 ** t)
    return w - lr * m_hat / (np.sqrt(v_hat) + eps)


def stable_spam_step(w, g, state: StableSpamState, cfg: StableSpamConfig,
                     global_step: int, lr: float | None = None):
    """One full Stable-SPAM step: AdaClip -> AdaGN -> MoRet check -> Adam."""
    if lr is None:
        lr = cfg.lr
    g, frac = adaclip(g, state.adaclip, cfg.gamma3)
    g = adagn(g, state.adagn, cfg.gamma1, cfg.gamma2, cfg.eps)
    reset = moret_reset(state.moments, global_step, cfg.reset_interval)
    state.last_clipped_fraction = frac
    state.last_reset = reset
    return adam_step(w, g, state.moments, lr, cfg.beta1, cfg.beta2, cfg.eps)


def spam_warmup_scale(global_step: int, reset_interval: int, warmup_steps: int) -> float:
    """Linear LR ramp k/warmup for k steps since the last reset boundary.

    Step reset_interval+1 is one step after a reset (scale 1/warmup); the
    ramp also applies from the start of training.
    """
    if warmup_steps <= 0:
        return 1.0
    if reset_interval:
        last = ((global_step - 1) // reset_interval) * reset_interval
    else:
        last = 0
    k = global_step - last
    return min(1.0, k / warmup_steps)


def spam_step(w, g, moments: AdamMoments, cfg: SpamConfig,
              global_step: int, lr: float | None = None):
    """SPAM: reset takes effect entering the step after a boundary, then
    SpikeClip against the (possibly just-zeroed) second moment, then Adam
    with the post-reset warmup applied to the LR."""
    if lr is None:
        lr = cfg.lr
    if cfg.reset_interval and global_step > 1 \
            and (global_step - 1) % cfg.reset_interval == 0:
        moments.reset()
    g = spike_clip(g, moments.v, cfg.gss_threshold)
    scale = spam_warmup_scale(global_step, cfg.reset_interval, cfg.warmup_steps)
    return adam_step(w, g, moments, lr * scale, cfg.beta1, cfg.beta2, cfg.eps)


def adafactor_step(w, g, state: AdafactorState, cfg: AdafactorConfig,
                   lr: float | None = None):
    """Simplified Adafactor: factored second moment for matrices (row/column
    mean accumulators, decay 1 - t^-0.8), unfactored for vectors, update
    clipped so rms(update) <= d. eps2 is accepted for config compatibility
    but the fixed-LR update here does not use it."""
    if lr is None:
        lr = cfg.lr
    w = as_matrix(w)
    g = as_matrix(g)
    _require_finite(g)
    t = state.step + 1
    state.step = t
    beta = 1.0 - t ** (-cfg.decay_power)
    sq = g * g + cfg.eps1
    if min(g.shape) == 1:
        if state.v is None:
            state.v = np.zeros_like(g)
        state.v = beta * state.v + (1.0 - beta) * sq
        v_hat = state.v
    else:
        row = np.mean(sq, axis=1, keepdims=True)
        col = np.mean(sq, axis=0, keepdims=True)
        if state.row is None:
            state.row = np.zeros_like(row)
            state.col = np.zeros_like(col)
        state.row = beta * state.row + (1.0 - beta) * row
        state.col = beta * state.col + (1.0 - beta) * col
        v_hat = state.row * state.col / np.mean(state.row)
    u = g / np.sqrt(v_hat)
    rms_u = math.sqrt(float(np.mean(u * u)))
    u = u / max(1.0, rms_u / cfg.d)
    return w - lr * u


def lion_step(w, g, m, lr: float, beta1: float = 0.9, beta2: float = 0.99,
              weight_decay: float = 0.0):
    """Lion: sign of the interpolated momentum; m is updated in place.
    sign(0) == 0, so a zero gradient with zero momentum leaves w unchanged."""
    w = as_matrix(w)
    g = as_matrix(g)
    _require_finite(g)
    c = beta1 * m + (1.0 - beta1) * g
    update = np.sign(c) + weight_decay * w
    m[...] = beta2 * m + (1.0 - beta2) * g
    return w - lr * update


def adam_mini_step(w, g, state: AdamMiniState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6):
    """Per-tensor Adam-mini: full first moment, one shared second-moment
    scalar (EMA of mean(g^2)) per tensor."""
    w = as_matrix(w)
    g = as_matrix(g)
    _require_finite(g)
    t = state.step_in_cycle + 1
    state.step_in_cycle = t
    state.m[...] = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * float(np.mean(g * g))
    m_hat = state.m / (1.0 - beta1 ** t)
    v_hat = state.v / (1.0 - beta2 ** t)
    return w - lr * m_hat / (math.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Composable multi-tensor optimizers (harness-facing)
# ---------------------------------------------------------------------------

@dataclass
class StepTelemetry:
    clipped_fraction: float = 0.0
    reset: bool = False
    lr_scale: float = 1.0
    grads_post: dict | None = None


class _Base:
    """Per-tensor base update rule with lazily created state."""

    def begin_step(self, global_step: int):
        return False, 1.0  # (reset_happened, lr_scale)

    def second_moment(self, name: str, shape) -> np.ndarray:
        raise ConfigError(f"{type(self).__name__} exposes no second moment "
                          "(required by spike_clip)")

    def update(self, name, w, g, lr):
        raise NotImplementedError


class SgdBase(_Base):
    def update(self, name, w, g, lr):
        return as_matrix(w) - lr * as_matrix(g)


class AdamBase(_Base):
    """Adam, optionally with MoRet. reset_style 'multiple' zeroes moments at
    multiples of the interval (Stable-SPAM); 'after' zeroes them entering the
    following step and applies a linear post-reset LR warmup (SPAM)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-6,
                 reset_interval=0, reset_style="multiple", warmup_steps=0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.reset_interval = reset_interval
        self.reset_style = reset_style
        self.warmup_steps = warmup_steps
        self.state: dict[str, AdamMoments] = {}

    def _moments(self, name, shape) -> AdamMoments:
        if name not in self.state:
            self.state[name] = AdamMoments.zeros(shape)
        return self.state[name]

    def begin_step(self, global_step):
        reset = False
        if self.reset_interval:
            if self.reset_style == "multiple":
                reset = global_step % self.reset_interval == 0
            else:
                reset = global_step > 1 and \
                    (global_step - 1) % self.reset_interval == 0
        if reset:
            for moments in self.state.values():
                moments.reset()
        scale = 1.0
        if self.warmup_steps:
            scale = spam_warmup_scale(global_step, self.reset_interval,
                                      self.warmup_steps)
        return reset, scale

    def second_moment(self, name, shape):
        return self._moments(name, shape).v

    def update(self, name, w, g, lr):
        moments = self._moments(name, np.shape(w))
        return adam_step(w, g, moments, lr, self.beta1, self.beta2, self.eps)


class LionBase(_Base):
    def __init__(self, beta1=0.9, beta2=0.99, weight_decay=0.0):
        self.beta1, self.beta2, self.weight_decay = beta1, beta2, weight_decay
        self.state: dict[str, np.ndarray] = {}

    def update(self, name, w, g, lr):
        if name not in self.state:
            self.state[name] = np.zeros(np.shape(as_matrix(w)))
        return lion_step(w, g, self.state[name], lr, self.beta1, self.beta2,
                         self.weight_decay)


class AdamMiniBase(_Base):
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-6):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, AdamMiniState] = {}

    def update(self, name, w, g, lr):
        if name not in self.state:
            self.state[name] = AdamMiniState.zeros(np.shape(as_matrix(w)))
        return adam_mini_step(w, g, self.state[name], lr, self.beta1,
                              self.beta2, self.eps)


class AdafactorBase(_Base):
    def __init__(self, cfg: AdafactorConfig | None = None):
        self.cfg = cfg or AdafactorConfig()
        self.state: dict[str, AdafactorState] = {}

    def update(self, name, w, g, lr):
        if name not in self.state:
            self.state[name] = AdafactorState()
        return adafactor_step(w, g, self.state[name], self.cfg, lr)


TRANSFORM_KINDS = ("adaclip", "adagn", "spike_clip", "grad_clip")


class ComposedOptimizer:
    """Ordered gradient transforms in front of a base update rule.

    Transforms run in listed order; ``adaclip``/``adagn``/``spike_clip`` are
    per-tensor, ``grad_clip`` rescales all tensors against the global norm.
    """

    def __init__(self, transforms, base: _Base, *,
                 gamma1=0.7, gamma2=0.9, gamma3=0.999, eps=1e-6,
                 gss_threshold=5000.0, grad_clip_threshold=1.0):
        transforms = list(transforms)
        for kind in transforms:
            if kind not in TRANSFORM_KINDS:
                raise ConfigError(f"unknown transform '{kind}'")
        if len(set(transforms)) != len(transforms):
            raise ConfigError(f"duplicate transform in {transforms}")
        self.transforms = transforms
        self.base = base
        self.gamma1, self.gamma2, self.gamma3, self.eps = gamma1, gamma2, gamma3, eps
        self.gss_threshold = gss_threshold
        self.grad_clip_threshold = grad_clip_threshold
        self._adaclip: dict[str, AdaClipState] = {}
        self._adagn: dict[str, AdaGnState] = {}

    def step(self, params: dict, grads: dict, lr: float,
             global_step: int) -> StepTelemetry:
        reset, lr_scale = self.base.begin_step(global_step)
        grads = {k: as_matrix(g) for k, g in grads.items()}
        clipped = 0
        total = sum(g.size for g in grads.values())
        for kind in self.transforms:
            if kind == "adaclip":
                for name, g in grads.items():
                    st = self._adaclip.setdefault(name, AdaClipState())
                    grads[name], frac = adaclip(g, st, self.gamma3)
                    clipped += int(round(frac * g.size))
            elif kind == "adagn":
                for name, g in grads.items():
                    st = self._adagn.setdefault(name, AdaGnState())
                    grads[name] = adagn(g, st, self.gamma1, self.gamma2, self.eps)
            elif kind == "spike_clip":
                for name, g in grads.items():
                    v = self.base.second_moment(name, g.shape)
                    clipped_g = spike_clip(g, v, self.gss_threshold)
                    clipped += int(np.sum(clipped_g != g))
                    grads[name] = clipped_g
            elif kind == "grad_clip":
                names = list(grads)
                clipped_list = grad_clip_global([grads[n] for n in names],
                                                self.grad_clip_threshold)
                grads = dict(zip(names, clipped_list))
        for name in params:
            params[name] = self.base.update(name, params[name], grads[name],
                                            lr * lr_scale)
        return StepTelemetry(clipped_fraction=clipped / total if total else 0.0,
                             reset=reset, lr_scale=lr_scale, grads_post=grads)


def compose(transforms, base: _Base, **kwargs) -> ComposedOptimizer:
    return ComposedOptimizer(transforms, base, **kwargs)
