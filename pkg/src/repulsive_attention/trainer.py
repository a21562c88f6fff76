"""Training loop for the repulsive multi-head classifier.

Each step runs forward, NLL loss, an exact reverse pass, and then splits the
parameters in two groups: the shared parameters (embedding, encoder, the
shared attention projection, output layer) take an Adam step on their
gradients; the per-head vectors ``v_i`` are treated as particles and moved by
the configured sampling rule.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    HEAD_PARAM,
    ForwardCache,
    SentenceClassifier,
    forward_batch,
    init_classifier,
    pad_batch,
)
from .kernel import KernelSpec, kernel_table
from .metrics import head_distance
from .numeric import Rng
from .sampler import (
    AdamState,
    SamplerConfig,
    adam_step,
    apply_update,
    grad_potential,
    sgld_step,
    spos_phi,
    stein_direction,
    svgd_phi,
)

REGULARIZERS = ("none", "frobenius", "disagreement", "cosine-param")
COSINE_VARIANTS = ("plain", "swap-ij", "swap-ij+smooth")
DEFAULT_LAMBDA = {"none": 0.0, "frobenius": 1.0, "disagreement": 1.0, "cosine-param": 0.1}


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    lam: float | None = None
    variant: str = "plain"

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REGULARIZERS}")
        if self.variant not in COSINE_VARIANTS:
            raise ValueError(f"unknown cosine variant {self.variant!r}")
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.kind])
        if self.lam < 0:
            raise ValueError("regularizer weight must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 4
    attn_dim: int = 8
    n_heads: int = 8
    use_encoder: bool = True
    head_scale: float = 0.01
    jitter: float = 1e-3
    zero_output: bool = True


@dataclass(frozen=True)
class TrainConfig:
    """``theta_update`` is ``plain`` (theta += eps * phi) or ``adam`` (Adam with
    ``lr = eps`` fed ``-phi``)."""

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    theta_update: str = "plain"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    clip: float = 5.0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    eval_batch_size: int = 256
    record_timing: bool = False

    def __post_init__(self):
        if self.theta_update not in ("plain", "adam"):
            raise ValueError("theta_update must be 'plain' or 'adam'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.clip > 0:
            raise ValueError("clip must be positive")

    @property
    def combined(self) -> bool:
        return self.sampler.rule != "plain" and self.regularizer.kind != "none"


# ---------------------------------------------------------------------------
# Loss, regularizers, gradients
# ---------------------------------------------------------------------------


def nll_loss(probs, labels) -> float:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    if p.shape[0] != y.shape[0]:
        raise ValueError("probs and labels disagree on batch size")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("probability rows must sum to 1")
    if np.any((y < 0) | (y >= p.shape[1])):
        bad = int(np.flatnonzero((y < 0) | (y >= p.shape[1]))[0])
        raise ValueError(f"label {int(y[bad])} at index {bad} outside 0..{p.shape[1] - 1}")
    picked = np.maximum(p[np.arange(y.size), y], 1e-12)
    return float(np.mean(-np.log(picked)))


def frobenius_regularizer(a):
    """Penalty ``||A A^T - I||_F^2`` and its gradient ``4 (A A^T - I) A``.

    Works on a single ``(M, n)`` matrix or a stack ``(..., M, n)``.
    """
    a = np.asarray(a, dtype=np.float64)
    gram = a @ np.swapaxes(a, -1, -2)
    r = gram - np.eye(a.shape[-2])
    penalty = np.sum(r * r, axis=(-2, -1))
    grad = 4.0 * r @ a
    return (float(penalty) if penalty.ndim == 0 else penalty), grad


def disagreement_regularizer(z):
    """Mean cosine similarity over unordered head pairs, and its gradient.

    ``z`` is ``(M, d)`` or a stack ``(..., M, d)``.
    """
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[-2]
    if m < 2:
        raise ValueError("disagreement needs at least 2 heads")
    norms = np.linalg.norm(z, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("disagreement undefined for a zero head output")
    u = z / norms[..., None]
    cos = u @ np.swapaxes(u, -1, -2)
    n_pairs = m * (m - 1) / 2
    off = cos.sum(axis=(-2, -1)) - np.trace(cos, axis1=-2, axis2=-1)
    penalty = 0.5 * off / n_pairs
    # d/dz_i sum_{j != i} cos(z_i, z_j) = sum_{j != i} (u_j - cos_ij u_i) / |z_i|
    others = 1.0 - np.eye(m)
    cos_off = cos * others
    grad = (others @ u - cos_off.sum(axis=-1)[..., None] * u) / norms[..., None] / n_pairs
    return (float(penalty) if np.ndim(penalty) == 0 else penalty), grad


def cosine_param_phi(particles, grad_u, variant: str, lam: float):
    """Update direction for the cosine-similarity parameter regularizer.

    ``plain`` descends ``lam * sum_{i<j} cos(theta_i, theta_j) / M``;
    ``swap-ij`` differentiates the cosine with respect to the *other*
    particle; ``swap-ij+smooth`` also weights the likelihood drift by the
    cosine, which is exactly the Stein direction with a cosine kernel and
    repulsive weight ``lam``. Returns ``(penalty, phi)``.
    """
    if variant not in COSINE_VARIANTS:
        raise ValueError(f"unknown cosine variant {variant!r}")
    x = np.asarray(particles, dtype=np.float64)
    g = np.asarray(grad_u, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValueError("cosine regularizer needs at least 2 particles")
    table = kernel_table(x, KernelSpec(kind="cosine"))
    penalty = lam * 0.5 * (table.K.sum() - np.trace(table.K)) / m
    if variant == "swap-ij+smooth":
        return penalty, stein_direction(table, g, lam)
    if variant == "plain":
        # table.G[i, j] = grad_{theta_i} cos(theta_i, theta_j)
        return penalty, -g - lam * table.G.sum(axis=1) / m
    return penalty, -g + lam * table.G.sum(axis=0) / m


def backward(model: SentenceClassifier, cache: ForwardCache, labels, reg: RegularizerSpec | None = None):
    """Exact gradients of the mean batch loss (plus ``reg`` when it acts on the
    loss). Returns ``(loss, grads)``; ``grads[HEAD_PARAM]`` has the same
    ``(d_a, M)`` layout as the parameter."""
    reg = reg or RegularizerSpec()
    p = model.params
    y = np.asarray(labels)
    bsz = y.size
    m, d = model.n_heads, model.dim
    keep = ~model.head_mask

    loss = nll_loss(cache.probs, y)
    dlogits = cache.probs.copy()
    dlogits[np.arange(bsz), y] -= 1.0
    dlogits /= bsz

    grads = {}
    grads["out_w"] = cache.feats.T @ dlogits
    grads["out_b"] = dlogits.sum(axis=0)
    dz = (dlogits @ p["out_w"].T).reshape(bsz, m, d) * keep[None, :, None]
    da = np.zeros_like(cache.a)

    if reg.kind in ("frobenius", "disagreement") and reg.lam > 0 and keep.sum() >= 1:
        idx = np.flatnonzero(keep)
        if reg.kind == "frobenius":
            pen, g = frobenius_regularizer(cache.a[:, idx])
            loss += reg.lam * float(np.mean(pen))
            da[:, idx] += (reg.lam / bsz) * g
        elif idx.size >= 2:
            pen, g = disagreement_regularizer(cache.z[:, idx])
            loss += reg.lam * float(np.mean(pen))
            dz[:, idx] += (reg.lam / bsz) * g

    h, a, s = cache.h, cache.a, cache.s
    da += dz @ np.swapaxes(h, 1, 2)
    dh = np.swapaxes(a, 1, 2) @ dz
    dlog = a * (da - np.sum(da * a, axis=-1, keepdims=True))
    dlog_t = np.swapaxes(dlog, 1, 2)  # (B, T, M)
    d_a_dim = s.shape[-1]
    grads[HEAD_PARAM] = s.reshape(-1, d_a_dim).T @ dlog_t.reshape(-1, m)
    dpre = (dlog_t @ p[HEAD_PARAM].T) * (1.0 - s * s)
    grads["attn_w"] = dpre.reshape(-1, d_a_dim).T @ h.reshape(-1, d)
    dh += dpre @ p["attn_w"]
    if model.use_encoder:
        dpre_e = dh * (1.0 - h * h)
        grads["enc_w"] = cache.x.reshape(-1, d).T @ dpre_e.reshape(-1, d)
        grads["enc_b"] = dpre_e.sum(axis=(0, 1))
        dx = dpre_e @ p["enc_w"].T
    else:
        dx = dh
    demb = np.zeros_like(p["embedding"])
    np.add.at(demb, cache.tokens[cache.valid], dx[cache.valid])
    grads["embedding"] = demb

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    return loss, grads


def batch_loss(model: SentenceClassifier, tokens, valid, labels, reg: RegularizerSpec | None = None) -> float:
    """Forward-only loss matching what :func:`backward` differentiates."""
    reg = reg or RegularizerSpec()
    cache = forward_batch(model, tokens, valid)
    loss = nll_loss(cache.probs, labels)
    keep = np.flatnonzero(~model.head_mask)
    if reg.kind == "frobenius" and reg.lam > 0 and keep.size >= 1:
        loss += reg.lam * float(np.mean(frobenius_regularizer(cache.a[:, keep])[0]))
    elif reg.kind == "disagreement" and reg.lam > 0 and keep.size >= 2:
        loss += reg.lam * float(np.mean(disagreement_regularizer(cache.z[:, keep])[0]))
    return loss


def finite_diff_oracle(lossfn, params, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_k) - f(x - h e_k)) / 2h`` per coordinate."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = lossfn(x)
        flat[k] = orig - step
        fm = lossfn(x)
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def clip_global_norm(arrays, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(a * a)) for a in arrays))
    if norm <= max_norm:
        return list(arrays), norm
    scale = max_norm / norm
    return [a * scale for a in arrays], norm


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Optimizer and RNG state carried between steps."""

    omega: dict[str, AdamState]
    theta: AdamState | None
    noise_rng: Rng
    step: int = 0


def init_state(model: SentenceClassifier, config: TrainConfig) -> TrainState:
    hyper = dict(beta1=config.beta1, beta2=config.beta2, eps_hat=config.adam_eps)
    omega = {n: AdamState.zeros_like(model.params[n], lr=config.lr, **hyper) for n in model.omega_names}
    theta = None
    if config.theta_update == "adam":
        theta = AdamState.zeros_like(model.particles, lr=config.sampler.eps, **hyper)
    return TrainState(omega=omega, theta=theta, noise_rng=Rng(config.seed, f"noise-{config.sampler.rule}"))


def theta_direction(particles, grad_u, config: TrainConfig, rng: Rng, eps: float):
    """Ascent direction ``phi`` for the active particles under ``config``."""
    s = config.sampler
    if s.rule == "plain":
        phi = -grad_u
    elif s.rule == "svgd":
        phi = svgd_phi(particles, grad_u, s)
    elif s.rule == "spos":
        phi = spos_phi(particles, grad_u, s, rng, eps)
    else:
        raise ValueError(f"rule {s.rule!r} has no phi")
    reg = config.regularizer
    if reg.kind == "cosine-param" and particles.shape[0] >= 2:
        _, phi_reg = cosine_param_phi(particles, grad_u, reg.variant, reg.lam)
        phi = phi_reg if s.rule == "plain" else phi + (phi_reg + grad_u)
    return phi


def train_step(model: SentenceClassifier, batch, config: TrainConfig, state: TrainState):
    """One iteration of the repulsive training loop.

    ``batch`` is ``(tokens, valid, labels)``. Masked heads are frozen for the
    step. Returns ``(model, state, loss)``.
    """
    tokens, valid, labels = batch
    if np.asarray(labels).size == 0:
        raise ValueError("empty batch")
    s = config.sampler
    cache = forward_batch(model, tokens, valid)
    loss, grads = backward(model, cache, labels, config.regularizer)

    # Shared parameters: clipped Adam.
    names = model.omega_names
    clipped, _ = clip_global_norm([grads[n] for n in names], config.clip)
    params = dict(model.params)
    omega = dict(state.omega)
    for n, g in zip(names, clipped):
        params[n], omega[n] = adam_step(omega[n], params[n], g)

    # Head particles.
    active = np.flatnonzero(~model.head_mask)
    theta_all = model.particles
    theta_opt = state.theta
    if active.size:
        theta = theta_all[active]
        g_nll = grads[HEAD_PARAM].T[active]
        (g_nll,), _ = clip_global_norm([g_nll], config.clip)
        grad_u = grad_potential(g_nll * s.grad_scale if s.grad_scale != 1.0 else g_nll, theta, s.prior)
        eps = s.stepsize(state.step)
        if s.rule == "sgld":
            if config.regularizer.kind == "cosine-param" and active.size >= 2:
                _, phi_reg = cosine_param_phi(theta, grad_u, config.regularizer.variant, config.regularizer.lam)
                grad_u = -phi_reg
            new_theta = sgld_step(theta, grad_u, eps, state.noise_rng)
        else:
            phi = theta_direction(theta, grad_u, config, state.noise_rng, eps)
            if theta_opt is None:
                new_theta, _ = apply_update(theta, phi, s, None, eps=eps)
            else:
                sub = replace(theta_opt, m=theta_opt.m[active], v=theta_opt.v[active], lr=eps)
                new_theta, sub = apply_update(theta, phi, s, sub)
                m_full, v_full = theta_opt.m.copy(), theta_opt.v.copy()
                m_full[active], v_full[active] = sub.m, sub.v
                theta_opt = replace(sub, m=m_full, v=v_full)
        theta_all = theta_all.copy()
        theta_all[active] = new_theta
    params[HEAD_PARAM] = theta_all.T.copy()

    new_model = replace(model, params=params, head_mask=model.head_mask.copy())
    new_state = replace(state, omega=omega, theta=theta_opt, step=state.step + 1)
    return new_model, new_state, loss


@dataclass
class EvalResult:
    probs: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,)
    z: np.ndarray  # (N, M, d)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predictions == self.labels))

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels


def iter_batches(sequences, labels, batch_size: int, order=None, vocab_size=None):
    n = len(sequences)
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        tokens, valid = pad_batch([sequences[i] for i in idx], vocab_size)
        yield tokens, valid, np.asarray(labels)[idx]


def evaluate(model: SentenceClassifier, split, batch_size: int = 256) -> EvalResult:
    probs, zs = [], []
    for tokens, valid, _ in iter_batches(split.sequences, split.labels, batch_size, vocab_size=model.vocab_size):
        cache = forward_batch(model, tokens, valid)
        probs.append(cache.probs)
        zs.append(cache.z)
    return EvalResult(probs=np.concatenate(probs), labels=np.asarray(split.labels), z=np.concatenate(zs))


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    dist: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch, loss, val_acc, dist, seconds):
        vals = (loss, val_acc, dist, seconds)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite history entry at epoch {epoch}: {vals}")
        if self.epoch and epoch <= self.epoch[-1]:
            raise ValueError("history epochs must increase")
        self.epoch.append(epoch)
        self.loss.append(float(loss))
        self.val_acc.append(float(val_acc))
        self.dist.append(float(dist))
        self.seconds.append(float(seconds))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc", "dist", "seconds"])
        for row in zip(self.epoch, self.loss, self.val_acc, self.dist, self.seconds):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _dist_or_zero(result: EvalResult) -> float:
    return head_distance(result.z) if result.z.shape[1] >= 2 else 0.0


def train(config: TrainConfig, dataset, model_config: ModelConfig = ModelConfig(),
          model: SentenceClassifier | None = None):
    """Run ``config.epochs`` epochs; returns ``(best_model, history)``.

    Epoch 0 records the untrained model. The returned model is the one with
    the best validation accuracy (earliest on ties).
    """
    if len(dataset.train.sequences) == 0:
        raise ValueError("empty training set")
    if model is None:
        model = init_classifier(dataset.vocab_size, model_config.dim, model_config.attn_dim,
                                model_config.n_heads, dataset.n_classes, Rng(config.seed, "init"),
                                use_encoder=model_config.use_encoder, head_scale=model_config.head_scale,
                                jitter=model_config.jitter, zero_output=model_config.zero_output)
    state = init_state(model, config)
    shuffle = Rng(config.seed, "shuffle")
    history = TrainHistory()
    clock = time.perf_counter if config.record_timing else (lambda: 0.0)
    start = clock()

    def record(epoch, loss):
        val = evaluate(model, dataset.val, config.eval_batch_size)
        history.append(epoch, loss, val.accuracy, _dist_or_zero(val), clock() - start)
        return val.accuracy

    train_split = dataset.train
    init_loss = sum(
        batch_loss(model, t, v, y, config.regularizer) * y.size
        for t, v, y in iter_batches(train_split.sequences, train_split.labels, config.eval_batch_size)
    ) / len(train_split.labels)
    best_acc, best_model = record(0, init_loss), model.copy()

    n = len(train_split.labels)
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        total = 0.0
        for tokens, valid, labels in iter_batches(train_split.sequences, train_split.labels,
                                                  config.batch_size, order, dataset.vocab_size):
            model, state, loss = train_step(model, (tokens, valid, labels), config, state)
            total += loss * labels.size
        acc = record(epoch, total / n)
        if acc > best_acc:
            best_acc, best_model = acc, model.copy()
            history.best_epoch = epoch
    return best_model, history
