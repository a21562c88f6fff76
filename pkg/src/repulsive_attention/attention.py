"""Attention mappings and the self-attentive sentence classifier.

Two attention families are provided:

* scaled dot-product heads combined by concatenation and an output
  projection, as used in Transformer blocks;
* additive (self-attentive) attention ``A = softmax(V^T tanh(W H^T))``,
  ``Z = A H``, where column ``i`` of ``V`` is head ``i``.

The classifier stacks embedding -> optional shared tanh-linear encoder ->
additive attention -> flattened ``Z`` -> affine -> softmax. Its per-head
vectors ``v_i`` are the particles moved by the sampler.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numeric import Rng, as_matrix, matmul, softmax_last, softmax_rows

# ---------------------------------------------------------------------------
# Scaled dot-product attention
# ---------------------------------------------------------------------------

DOT_SCOPES = ("q", "k", "v")


@dataclass
class DotProductHeadParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        self.w_q = as_matrix(self.w_q, "w_q")
        self.w_k = as_matrix(self.w_k, "w_k")
        self.w_v = as_matrix(self.w_v, "w_v")
        if self.w_q.shape != self.w_k.shape:
            raise ValueError(f"w_q {self.w_q.shape} and w_k {self.w_k.shape} must match")
        if self.w_v.shape[0] != self.w_q.shape[0]:
            raise ValueError("w_v must share the model width of w_q")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


def dot_product_head(q, k, v, params: DotProductHeadParams, d_k: int | None = None):
    """Return ``(A, Z)`` for one head: ``A = softmax(Q_i K_i^T / sqrt(d_k))``, ``Z = A V_i``."""
    q, k, v = as_matrix(q, "Q"), as_matrix(k, "K"), as_matrix(v, "V")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K and V must have the same number of rows: {k.shape} vs {v.shape}")
    d_k = params.d_k if d_k is None else d_k
    qi = matmul(q, params.w_q)
    ki = matmul(k, params.w_k)
    vi = matmul(v, params.w_v)
    a = softmax_rows(qi @ ki.T / math.sqrt(d_k))
    return a, a @ vi


def multihead_concat(zs, w_o) -> np.ndarray:
    zs = [as_matrix(z, f"Z_{i}") for i, z in enumerate(zs)]
    if not zs:
        raise ValueError("need at least one head output")
    rows, width = zs[0].shape
    for i, z in enumerate(zs):
        if z.shape != (rows, width):
            raise ValueError(f"head {i} output has shape {z.shape}, expected {(rows, width)}")
    return matmul(np.concatenate(zs, axis=1), w_o)


@dataclass
class DotProductMHA:
    heads: list[DotProductHeadParams]
    w_o: np.ndarray

    def __post_init__(self):
        if not self.heads:
            raise ValueError("need at least one head")
        d_k = self.heads[0].d_k
        if any(h.d_k != d_k for h in self.heads):
            raise ValueError("all heads must share d_k")
        self.w_o = as_matrix(self.w_o, "w_o")
        width = sum(h.w_v.shape[1] for h in self.heads)
        if self.w_o.shape[0] != width:
            raise ValueError(f"w_o has {self.w_o.shape[0]} rows, concat width is {width}")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def forward(self, q, k, v):
        attn, outs = [], []
        for head in self.heads:
            a, z = dot_product_head(q, k, v, head)
            attn.append(a)
            outs.append(z)
        return multihead_concat(outs, self.w_o), attn

    def particles(self, scope=DOT_SCOPES) -> np.ndarray:
        """Row ``i`` = flatten(W_q) | flatten(W_k) | flatten(W_v) of head ``i``,
        restricted to ``scope``, each matrix row-major."""
        scope = _check_scope(scope)
        return np.stack([
            np.concatenate([getattr(h, f"w_{s}").ravel() for s in scope]) for h in self.heads
        ])

    def with_particles(self, values, scope=DOT_SCOPES) -> "DotProductMHA":
        scope = _check_scope(scope)
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.n_heads:
            raise ValueError(f"expected {self.n_heads} particle rows, got {values.shape[0]}")
        heads = []
        for head, row in zip(self.heads, values):
            mats = {s: getattr(head, f"w_{s}") for s in DOT_SCOPES}
            offset = 0
            for s in scope:
                size = mats[s].size
                mats[s] = row[offset:offset + size].reshape(mats[s].shape).copy()
                offset += size
            if offset != row.size:
                raise ValueError(f"particle width {row.size} does not match scope size {offset}")
            heads.append(DotProductHeadParams(mats["q"], mats["k"], mats["v"]))
        return DotProductMHA(heads, self.w_o.copy())


def _check_scope(scope):
    scope = tuple(s for s in DOT_SCOPES if s in scope)
    if not scope:
        raise ValueError(f"repulsion scope must be a non-empty subset of {DOT_SCOPES}")
    return scope


# ---------------------------------------------------------------------------
# Additive attention
# ---------------------------------------------------------------------------


@dataclass
class AdditiveAttnParams:
    w: np.ndarray  # (d_a, d), shared
    v: np.ndarray  # (d_a, M), column i is head i

    def __post_init__(self):
        self.w = as_matrix(self.w, "W")
        self.v = as_matrix(self.v, "V")
        if self.w.shape[0] != self.v.shape[0]:
            raise ValueError(f"W {self.w.shape} and V {self.v.shape} disagree on d_a")


def additive_attention(h, params: AdditiveAttnParams):
    """``A = softmax(V^T tanh(W H^T))`` (M x n) and ``Z = A H`` (M x d)."""
    h = as_matrix(h, "H")
    if h.shape[0] < 1:
        raise ValueError("H needs at least one row")
    if h.shape[1] != params.w.shape[1]:
        raise ValueError(f"H width {h.shape[1]} does not match W {params.w.shape}")
    a = softmax_rows(params.v.T @ np.tanh(params.w @ h.T))
    return a, a @ h


# ---------------------------------------------------------------------------
# Sentence classifier
# ---------------------------------------------------------------------------

PARAM_ORDER = ("embedding", "enc_w", "enc_b", "attn_w", "attn_v", "out_w", "out_b")
HEAD_PARAM = "attn_v"


@dataclass
class SentenceClassifier:
    """Parameter container; ``head_mask[i]`` True means head ``i`` is masked."""

    params: dict[str, np.ndarray]
    head_mask: np.ndarray = field(default=None)
    use_encoder: bool = True

    def __post_init__(self):
        if self.head_mask is None:
            self.head_mask = np.zeros(self.n_heads, dtype=bool)
        self.head_mask = np.asarray(self.head_mask, dtype=bool)
        self._check_shapes()

    def _check_shapes(self):
        p = self.params
        vocab, d = p["embedding"].shape
        d_a, m = p["attn_v"].shape
        if self.use_encoder:
            if p["enc_w"].shape != (d, d) or p["enc_b"].shape != (d,):
                raise ValueError("encoder weights must be (d, d) and (d,)")
        if p["attn_w"].shape != (d_a, d):
            raise ValueError(f"attn_w must be {(d_a, d)}, got {p['attn_w'].shape}")
        if p["out_w"].shape[0] != m * d:
            raise ValueError(f"out_w must have {m * d} rows, got {p['out_w'].shape[0]}")
        if p["out_b"].shape != (p["out_w"].shape[1],):
            raise ValueError("out_b must match the class count of out_w")
        if self.head_mask.shape != (m,):
            raise ValueError(f"head mask must have length {m}")

    @property
    def n_heads(self) -> int:
        return self.params["attn_v"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.params["embedding"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["embedding"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["out_b"].shape[0]

    @property
    def omega_names(self) -> tuple[str, ...]:
        names = [n for n in PARAM_ORDER if n != HEAD_PARAM]
        if not self.use_encoder:
            names = [n for n in names if n not in ("enc_w", "enc_b")]
        return tuple(names)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(n for n in PARAM_ORDER if n in self.omega_names or n == HEAD_PARAM)

    @property
    def particles(self) -> np.ndarray:
        return self.params[HEAD_PARAM].T.copy()

    def with_particles(self, values) -> "SentenceClassifier":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_heads, self.params[HEAD_PARAM].shape[0]):
            raise ValueError(f"particle array has shape {values.shape}")
        params = dict(self.params)
        params[HEAD_PARAM] = values.T.copy()
        return replace(self, params=params, head_mask=self.head_mask.copy())

    def copy(self) -> "SentenceClassifier":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       head_mask=self.head_mask.copy())

    def additive_params(self) -> AdditiveAttnParams:
        return AdditiveAttnParams(self.params["attn_w"], self.params["attn_v"])


def init_classifier(vocab_size: int, dim: int, attn_dim: int, n_heads: int, n_classes: int,
                    rng: Rng, use_encoder: bool = True, head_scale: float = 1.0,
                    jitter: float = 1e-3, zero_output: bool = True) -> SentenceClassifier:
    """Random initial model.

    Every head vector gets its own draw of scale ``head_scale / sqrt(attn_dim)``
    plus ``jitter`` noise so no two particles coincide.
    """
    if n_heads < 1:
        raise ValueError("need at least one head")

    def normal(shape, scale):
        return scale * rng.gaussian(int(np.prod(shape))).reshape(shape)

    params = {"embedding": normal((vocab_size, dim), 1.0)}
    if use_encoder:
        params["enc_w"] = normal((dim, dim), 1.0 / math.sqrt(dim))
        params["enc_b"] = np.zeros(dim)
    params["attn_w"] = normal((attn_dim, dim), 1.0 / math.sqrt(dim))
    v = normal((attn_dim, n_heads), head_scale / math.sqrt(attn_dim))
    params["attn_v"] = v + normal((attn_dim, n_heads), jitter)
    if zero_output:
        params["out_w"] = np.zeros((n_heads * dim, n_classes))
    else:
        params["out_w"] = normal((n_heads * dim, n_classes), 1.0 / math.sqrt(n_heads * dim))
    params["out_b"] = np.zeros(n_classes)
    return SentenceClassifier(params=params, use_encoder=use_encoder)


def pad_batch(sequences, vocab_size: int | None = None):
    """Right-pad token sequences; returns ``(tokens, valid)`` arrays of shape (B, T)."""
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    if not seqs:
        raise ValueError("empty batch")
    for b, s in enumerate(seqs):
        if s.ndim != 1 or s.size == 0:
            raise ValueError(f"sequence {b} must be a non-empty 1-D token list")
        if vocab_size is not None:
            bad = np.flatnonzero((s < 0) | (s >= vocab_size))
            if bad.size:
                raise ValueError(f"sequence {b}: token {int(s[bad[0]])} at position {int(bad[0])} "
                                 f"is outside the vocabulary of size {vocab_size}")
    t = max(s.size for s in seqs)
    tokens = np.zeros((len(seqs), t), dtype=np.int64)
    valid = np.zeros((len(seqs), t), dtype=bool)
    for b, s in enumerate(seqs):
        tokens[b, :s.size] = s
        valid[b, :s.size] = True
    return tokens, valid


@dataclass
class ForwardCache:
    tokens: np.ndarray  # (B, T)
    valid: np.ndarray  # (B, T)
    x: np.ndarray  # embedded tokens (B, T, d)
    h: np.ndarray  # hidden states (B, T, d)
    s: np.ndarray  # tanh(H W^T) (B, T, d_a)
    a: np.ndarray  # attention (B, M, T)
    z: np.ndarray  # unmasked head outputs (B, M, d)
    feats: np.ndarray  # flattened masked Z (B, M*d)
    probs: np.ndarray  # (B, C)


def forward_batch(model: SentenceClassifier, tokens: np.ndarray, valid: np.ndarray) -> ForwardCache:
    p = model.params
    x = p["embedding"][tokens]
    if model.use_encoder:
        h = np.tanh(x @ p["enc_w"] + p["enc_b"])
    else:
        h = x
    s = np.tanh(h @ p["attn_w"].T)
    logits_att = np.swapaxes(s @ p["attn_v"], 1, 2)
    a = softmax_last(logits_att, valid[:, None, :])
    z = a @ h
    keep = (~model.head_mask).astype(np.float64)
    feats = (z * keep[None, :, None]).reshape(z.shape[0], -1)
    logits = feats @ p["out_w"] + p["out_b"]
    probs = softmax_last(logits)
    return ForwardCache(tokens=tokens, valid=valid, x=x, h=h, s=s, a=a, z=z, feats=feats, probs=probs)


def classifier_forward(tokens, model: SentenceClassifier) -> np.ndarray:
    """Class probabilities for one token sequence."""
    tok, valid = pad_batch([tokens], model.vocab_size)
    return forward_batch(model, tok, valid).probs[0]


def mask_head(model: SentenceClassifier, head: int) -> SentenceClassifier:
    """Copy of ``model`` whose head ``head`` output is zeroed at inference."""
    return _set_mask(model, head, True)


def unmask_head(model: SentenceClassifier, head: int) -> SentenceClassifier:
    return _set_mask(model, head, False)


def _set_mask(model, head, value):
    if not 0 <= head < model.n_heads:
        raise ValueError(f"head index {head} out of range for {model.n_heads} heads")
    mask = model.head_mask.copy()
    mask[head] = value
    return replace(model, head_mask=mask)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_dict(model: SentenceClassifier) -> dict:
    manifest, values, offset = [], [], 0
    for name in model.param_names:
        arr = model.params[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        values.extend(float(v) for v in arr.ravel())
        offset += arr.size
    return {
        "format": "repulsive-attention-checkpoint/1",
        "use_encoder": model.use_encoder,
        "head_mask": [bool(b) for b in model.head_mask],
        "manifest": manifest,
        "values": values,
    }


def save_checkpoint(model: SentenceClassifier, path):
    atomic_write_text(path, json.dumps(checkpoint_dict(model)))


def load_checkpoint(path) -> SentenceClassifier:
    data = json.loads(Path(path).read_text())
    flat = np.asarray(data["values"], dtype=np.float64)
    params = {}
    for entry in data["manifest"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        params[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    return SentenceClassifier(params=params, head_mask=np.asarray(data["head_mask"], dtype=bool),
                              use_encoder=data["use_encoder"])


def attention_csv(a: np.ndarray, tokens=None) -> str:
    """Rows ``head,position,token,weight`` for one example's M x n attention matrix."""
    lines = ["head,position,token,weight"]
    m, n = a.shape
    for i in range(m):
        for t in range(n):
            tok = "" if tokens is None else int(tokens[t])
            lines.append(f"{i},{t},{tok},{float(a[i, t])!r}")
    return "\n".join(lines) + "\n"
