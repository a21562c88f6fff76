"""Helpers shared by the trainer and acceptance tests."""
import math

import numpy as np

from repulsive_attention.attention import HEAD_PARAM, forward_batch, init_classifier, pad_batch
from repulsive_attention.numeric import Rng
from repulsive_attention.trainer import backward, batch_loss, finite_diff_oracle


def random_setup(seed, use_encoder=True, m=3, batch=4):
    r = np.random.default_rng(seed)
    model = init_classifier(12, 4, 5, m, 3, Rng(seed, "init"), use_encoder=use_encoder, zero_output=False)
    seqs = [r.integers(0, 12, size=r.integers(2, 7)) for _ in range(batch)]
    tokens, valid = pad_batch(seqs, 12)
    labels = r.integers(0, 3, size=batch)
    return model, tokens, valid, labels


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_gradients(model, tokens, valid, labels, reg=None, tol=1e-4):
    _, grads = backward(model, forward_batch(model, tokens, valid), labels, reg)
    for name in model.param_names:
        def f(value, name=name):
            params = dict(model.params)
            params[name] = value
            return batch_loss(type(model)(params, model.head_mask, model.use_encoder), tokens, valid, labels, reg)

        fd = finite_diff_oracle(f, model.params[name])
        assert relative_error(grads[name], fd) < tol, name


def reference_plain_training(model, batches, lr, eps, clip, steps, b1=0.9, b2=0.999, tiny=1e-8):
    """Ordinary joint training with no sampler: Adam on shared weights, gradient step on heads."""
    params = {k: v.copy() for k, v in model.params.items()}
    names = [n for n in model.param_names if n != HEAD_PARAM]
    m = {n: np.zeros_like(params[n]) for n in names}
    v = {n: np.zeros_like(params[n]) for n in names}
    for t in range(1, steps + 1):
        tokens, valid, labels = batches[(t - 1) % len(batches)]
        cur = type(model)({k: x.copy() for k, x in params.items()}, use_encoder=model.use_encoder)
        _, grads = backward(cur, forward_batch(cur, tokens, valid), labels)
        norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
        for n in names:
            g = grads[n] * (clip / norm) if norm > clip else grads[n]
            m[n] = b1 * m[n] + (1 - b1) * g
            v[n] = b2 * v[n] + (1 - b2) * g * g
            params[n] = params[n] - lr * (m[n] / (1 - b1**t)) / (np.sqrt(v[n] / (1 - b2**t)) + tiny)
        gh = grads[HEAD_PARAM]
        hn = float(np.linalg.norm(gh))
        if hn > clip:
            gh = gh * (clip / hn)
        params[HEAD_PARAM] = params[HEAD_PARAM] - eps * gh
    return params


def make_batches(n=5, m=3, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        seqs = [r.integers(0, 12, size=r.integers(2, 7)) for _ in range(6)]
        out.append((*pad_batch(seqs, 12), r.integers(0, 3, size=6)))
    return out
