"""Particle update rules: SVGD, SPOS, SGLD, and optimizer plumbing.

Particles are stored as an ``(M, dim)`` float64 array; row ``i`` is the
flattened parameter vector of head ``i``.

Sign convention: ``phi`` is an *ascent* direction on the log posterior, so a
plain update is ``theta + eps * phi``. Descent-style optimizers (Adam) are fed
the pseudo-gradient ``-phi``. All of that lives in :func:`apply_update`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kernel import KernelSpec, kernel_table
from .numeric import Rng

RULES = ("plain", "svgd", "spos", "sgld")
PRIOR_KINDS = ("uniform", "gaussian")


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "uniform"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {self.kind!r}; expected one of {PRIOR_KINDS}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian prior requires sigma > 0")


@dataclass(frozen=True)
class SamplerConfig:
    """How the head parameters move each step.

    ``decay`` multiplies the stepsize after every step (1.0 keeps it fixed).
    ``grad_scale`` multiplies the minibatch-mean likelihood gradient; set it
    to the training-set size to target the exact posterior.
    ``allow_adaptive_spos`` lets SPOS run under Adam; the noise scale is then
    no longer calibrated, so results are not exact samples.
    """

    rule: str = "svgd"
    eps: float = 0.1
    decay: float = 1.0
    alpha: float = 1.0
    beta: float = 1000.0
    grad_scale: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    allow_adaptive_spos: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if not self.eps > 0:
            raise ValueError("stepsize eps must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("repulsive weight alpha must be non-negative")
        if not self.beta > 0:
            raise ValueError("beta must be positive (inf allowed)")
        if not self.grad_scale > 0:
            raise ValueError("grad_scale must be positive")

    def stepsize(self, step: int) -> float:
        return self.eps * self.decay**step


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        p = np.asarray(params, dtype=np.float64)
        return cls(m=np.zeros_like(p), v=np.zeros_like(p), **hyper)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def adam_step(state: AdamState, params, grads) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; returns new params and a new state."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    _check_same_shape(p, g, "adam_step")
    _check_same_shape(p, state.m, "adam_step state")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return new_p, replace(state, m=m, v=v, t=t)


def grad_potential(grad_nll, particles, prior: PriorSpec) -> np.ndarray:
    """Gradient of U = -log p(D|theta) - log p0(theta), row per particle."""
    g = np.asarray(grad_nll, dtype=np.float64)
    x = np.asarray(particles, dtype=np.float64)
    _check_same_shape(g, x, "grad_potential")
    if prior.kind == "uniform":
        return g
    return g + x / (prior.sigma**2)


def svgd_phi(particles, grad_u, config: SamplerConfig) -> np.ndarray:
    """Stein direction for every particle.

    phi_i = (1/M) sum_j [ -k(x_j, x_i) gradU_j + alpha * grad_{x_j} k(x_j, x_i) ]
    """
    x = np.asarray(particles, dtype=np.float64)
    g = np.asarray(grad_u, dtype=np.float64)
    _check_same_shape(x, g, "svgd_phi")
    m = x.shape[0]
    if m == 1:
        return -g
    table = kernel_table(x, config.kernel)
    return stein_direction(table, g, config.alpha)


def stein_direction(table, grad_u: np.ndarray, alpha: float) -> np.ndarray:
    m = grad_u.shape[0]
    drift = -(table.K.T @ grad_u)
    repulsion = table.G.sum(axis=0)
    return (drift + alpha * repulsion) / m


def spos_phi(particles, grad_u, config: SamplerConfig, rng: Rng, eps: float | None = None) -> np.ndarray:
    """SVGD direction plus Langevin drift ``-gradU_i / beta`` and noise.

    The noise coefficient ``sqrt(2 / (beta * eps))`` makes the per-step
    displacement ``eps * phi`` carry noise of scale ``sqrt(2 eps / beta)``.
    """
    eps = config.eps if eps is None else eps
    if not eps > 0:
        raise ValueError("stepsize eps must be positive")
    base = svgd_phi(particles, grad_u, config)
    g = np.asarray(grad_u, dtype=np.float64)
    xi = rng.gaussian(g.size).reshape(g.shape)
    beta_inv = 1.0 / config.beta
    return base - beta_inv * g + math.sqrt(2.0 * beta_inv / eps) * xi


def sgld_step(particle, grad_u, eps: float, rng: Rng | None, noise=None) -> np.ndarray:
    """theta - eps * gradU + sqrt(2 eps) * xi.

    ``noise`` overrides the Gaussian draw (``rng`` is then not touched).
    """
    if not eps > 0:
        raise ValueError("stepsize eps must be positive")
    x = np.asarray(particle, dtype=np.float64)
    g = np.asarray(grad_u, dtype=np.float64)
    _check_same_shape(x, g, "sgld_step")
    if noise is None:
        noise = rng.gaussian(x.size).reshape(x.shape)
    return x - eps * g + math.sqrt(2.0 * eps) * np.asarray(noise, dtype=np.float64)


def apply_update(particles, phi, config: SamplerConfig, optimizer: AdamState | None = None,
                 eps: float | None = None):
    """Move particles along ``phi``.

    With ``optimizer=None`` this is ``theta + eps * phi``. With an
    :class:`AdamState` the optimizer receives ``-phi`` as its gradient and its
    own ``lr`` plays the role of the stepsize. Returns
    ``(particles, optimizer_state)``.
    """
    x = np.asarray(particles, dtype=np.float64)
    d = np.asarray(phi, dtype=np.float64)
    _check_same_shape(x, d, "apply_update")
    if optimizer is None:
        eps = config.eps if eps is None else eps
        return x + eps * d, None
    if config.rule == "spos" and not config.allow_adaptive_spos:
        raise ValueError("SPOS noise is calibrated for plain updates; "
                         "set allow_adaptive_spos to run it under Adam")
    return adam_step(optimizer, x, -d)
