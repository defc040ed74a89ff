"""The fast-gradient-sign family as one iteration engine.

Every method is a setting of :class:`AttackConfig`:

=========  ==========  ======  =========
name       iterations  mu      p
=========  ==========  ======  =========
fgsm       1 (a = e)   0       0
ifgsm      N           0       0
mifgsm     N           1       0
di2fgsm    N           0       0.5
mdi2fgsm   N           1       0.5
=========  ==========  ======  =========

Untargeted attacks ascend the loss, targeted ones descend it. A model is
anything exposing ``value_and_grad(batch, loss) -> (values, grads)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import LossSpec
from .transforms import TransformPipeline, default_pipeline, derive_rng, maybe_transform

ZERO_GRAD_L1 = 1e-12

PRESETS = {
    "fgsm": dict(mu=0.0, p=0.0),
    "ifgsm": dict(mu=0.0, p=0.0),
    "mifgsm": dict(mu=1.0, p=0.0),
    "di2fgsm": dict(mu=0.0, p=0.5),
    "mdi2fgsm": dict(mu=1.0, p=0.5),
}
ATTACK_NAMES = tuple(PRESETS)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    iterations: int = 10
    alpha: float | None = None  # None -> epsilon / iterations
    mu: float = 0.0
    p: float = 0.0
    targeted: bool = False
    loss: LossSpec | None = None
    pipeline: TransformPipeline | None = None
    seed: int = 0
    streams: int = 1  # transform streams whose gradients are averaged per iteration

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not 0 <= self.p <= 1:
            raise ValueError("p must be in [0, 1]")
        if self.streams < 1:
            raise ValueError("streams must be >= 1")
        if self.alpha is not None and (self.alpha < 0 or (self.alpha == 0 and self.epsilon > 0)):
            raise ValueError("alpha must be > 0")

    @property
    def step_size(self) -> float:
        return self.epsilon / self.iterations if self.alpha is None else self.alpha

    @property
    def transform(self) -> TransformPipeline:
        return (self.pipeline or default_pipeline()).with_p(self.p)

    def scaled(self, factor: float) -> "AttackConfig":
        """Same attack with epsilon (and an explicit alpha) multiplied by ``factor``."""
        alpha = None if self.alpha is None else self.alpha * factor
        return replace(self, epsilon=self.epsilon * factor, alpha=alpha)


def preset(name: str, epsilon: float, iterations: int = 10, **overrides) -> AttackConfig:
    """Config for a named method; ``overrides`` win over the preset values."""
    if name not in PRESETS:
        raise ValueError(f"unknown attack {name!r}; choose from {', '.join(ATTACK_NAMES)}")
    values = dict(PRESETS[name])
    if name == "fgsm":
        values.update(iterations=1, alpha=None)
    else:
        values["iterations"] = iterations
    values.update(overrides)
    return AttackConfig(epsilon=epsilon, **values)


@dataclass
class AttackState:
    current: np.ndarray
    momentum: np.ndarray
    iteration: int = 0


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    original: np.ndarray
    iterations_run: int
    epsilon: float
    trace: list[dict] = field(default_factory=list)
    success: dict[str, bool] = field(default_factory=dict)
    final_ssim: float | None = None
    iterates: list[np.ndarray] | None = None
    status: str = "ok"
    runs: int = 1
    adjustments: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.adversarial - self.original))) if self.adversarial.size else 0.0


def sign(g) -> np.ndarray:
    """Elementwise sign with sign(0) = 0; NaN is rejected."""
    g = np.asarray(g, dtype=np.float64)
    if np.any(np.isnan(g)):
        raise ValueError("sign of NaN gradient")
    return np.sign(g)


def clip_to_ball(candidate, original, epsilon: float) -> np.ndarray:
    """Clamp to the intersection of the L-inf ball and the [0, 1] pixel range."""
    candidate = np.asarray(candidate, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if candidate.shape != original.shape:
        raise ValueError(f"shape mismatch: {candidate.shape} vs {original.shape}")
    lo = np.maximum(0.0, original - epsilon)
    hi = np.minimum(1.0, original + epsilon)
    return np.minimum(np.maximum(candidate, lo), hi)


def momentum_update(momentum, grad, mu: float) -> tuple[np.ndarray, bool]:
    """``mu * g + grad / |grad|_1``; a vanishing gradient contributes nothing.

    Returns the new momentum and whether the gradient was treated as zero.
    """
    l1 = float(np.sum(np.abs(grad)))
    if l1 < ZERO_GRAD_L1:
        return mu * momentum, True
    return mu * momentum + grad / l1, False


def _gradient(model, inputs: list[np.ndarray], loss):
    values, grads = model.value_and_grad(np.stack(inputs), loss)
    values = np.atleast_1d(values)
    if len(inputs) == 1:
        return float(values[0]), grads[0]
    return float(np.mean(values)), np.mean(grads, axis=0)


def fgsm(model, x, config: AttackConfig) -> AttackOutcome:
    """Single step of size epsilon; mu, p and alpha are ignored."""
    if config.iterations != 1:
        raise ValueError("fgsm takes a config with iterations == 1")
    x = np.asarray(x, dtype=np.float64)
    direction = -1.0 if config.targeted else 1.0
    loss, grad = _gradient(model, [x], config.loss)
    adv = clip_to_ball(x + direction * config.epsilon * sign(grad), x, config.epsilon)
    trace = [{"loss": loss, "grad_l1": float(np.sum(np.abs(grad))), "transformed": 0,
              "zero_grad": bool(np.sum(np.abs(grad)) < ZERO_GRAD_L1)}]
    return AttackOutcome(adv, x, 1, config.epsilon, trace)


def run_attack(model, x, config: AttackConfig, keep_iterates: bool = False, stop=None) -> AttackOutcome:
    """Iterate the sign-gradient update ``config.iterations`` times.

    Each iteration draws T(x; p) once per stream, averages the loss gradients
    at the drawn inputs, folds them into the momentum when ``mu > 0``, steps
    ``alpha`` along the sign and clips to the epsilon ball. ``stop(n, adv)``
    may end the run early after iteration ``n``.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha = config.step_size
    direction = -1.0 if config.targeted else 1.0
    pipeline = config.transform
    streams = [derive_rng(config.seed, k) for k in range(config.streams)]
    state = AttackState(x.copy(), np.zeros_like(x))
    trace, iterates = [], [] if keep_iterates else None

    for _ in range(config.iterations):
        inputs, transformed = [], 0
        for rng in streams:
            t, hit = maybe_transform(pipeline, state.current, rng)
            inputs.append(t)
            transformed += hit
        loss, grad = _gradient(model, inputs, config.loss)
        grad_l1 = float(np.sum(np.abs(grad)))
        if config.mu > 0:
            state.momentum, zero = momentum_update(state.momentum, grad, config.mu)
            step = sign(state.momentum)
        else:
            zero = grad_l1 < ZERO_GRAD_L1
            step = sign(grad)
        state.current = clip_to_ball(state.current + direction * alpha * step, x, config.epsilon)
        state.iteration += 1
        trace.append({"loss": loss, "grad_l1": grad_l1, "transformed": transformed, "zero_grad": zero})
        if keep_iterates:
            iterates.append(state.current.copy())
        if stop is not None and stop(state.iteration, state.current):
            break

    return AttackOutcome(state.current, x, state.iteration, config.epsilon, trace, iterates=iterates)

