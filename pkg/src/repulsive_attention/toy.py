"""Sampler checks on closed-form 1-D targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampler import SamplerConfig, apply_update, sgld_step, spos_phi, svgd_phi
from .numeric import Rng

TARGETS = ("gaussian-1d", "mixture-1d")
MIXTURE_MEANS = np.array([-3.0, 3.0])


def grad_u(target: str, x) -> np.ndarray:
    """Gradient of the negative log density.

    ``gaussian-1d`` is N(0, 1). ``mixture-1d`` is 0.5 N(-3, 1) + 0.5 N(3, 1),
    whose gradient is ``sum_k r_k(x) (x - mu_k)`` with responsibilities
    computed in log space.
    """
    x = np.asarray(x, dtype=np.float64)
    if target == "gaussian-1d":
        return x.copy()
    if target == "mixture-1d":
        logw = -0.5 * (x[..., None] - MIXTURE_MEANS) ** 2
        r = np.exp(logw - np.logaddexp.reduce(logw, axis=-1, keepdims=True))
        return np.sum(r * (x[..., None] - MIXTURE_MEANS), axis=-1)
    raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")


@dataclass
class ToyResult:
    target: str
    trace: np.ndarray  # (iterations + 1, m)
    particles: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.particles.mean())

    @property
    def var(self) -> float:
        return float(self.particles.var())

    @property
    def n_left(self) -> int:
        return int(np.sum(self.particles < 0))

    @property
    def n_right(self) -> int:
        return int(np.sum(self.particles > 0))

    def summary(self) -> dict:
        return {"target": self.target, "m": int(self.particles.size), "mean": self.mean,
                "var": self.var, "n_left": self.n_left, "n_right": self.n_right}


def sample_toy(target: str, sampler: SamplerConfig, m: int = 50, iterations: int = 2000,
               seed: int = 0, init: float | None = None, init_scale: float = 1.0) -> ToyResult:
    """Run ``sampler.rule`` on a 1-D target.

    Particles start at N(0, init_scale^2) draws, or all at ``init`` when given.
    The ``plain`` rule is independent gradient descent on U.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")
    if m < 1 or iterations < 0:
        raise ValueError("need m >= 1 and iterations >= 0")
    if init is None:
        x = init_scale * Rng(seed, "toy-init").gaussian(m).reshape(m, 1)
    else:
        x = np.full((m, 1), float(init))
    noise = Rng(seed, f"toy-{sampler.rule}")
    trace = np.empty((iterations + 1, m))
    trace[0] = x[:, 0]
    for step in range(iterations):
        eps = sampler.stepsize(step)
        g = grad_u(target, x)
        if sampler.rule == "sgld":
            x = sgld_step(x, g, eps, noise)
        else:
            if sampler.rule == "plain":
                phi = -g
            elif sampler.rule == "svgd":
                phi = svgd_phi(x, g, sampler)
            else:
                phi = spos_phi(x, g, sampler, noise, eps)
            x, _ = apply_update(x, phi, sampler, eps=eps)
        trace[step + 1] = x[:, 0]
    return ToyResult(target, trace, x[:, 0].copy())


def trace_csv(result: ToyResult) -> str:
    lines = ["iteration,particle,value"]
    for it, row in enumerate(result.trace):
        lines.extend(f"{it},{i},{float(v)!r}" for i, v in enumerate(row))
    return "\n".join(lines) + "\n"
