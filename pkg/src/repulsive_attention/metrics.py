"""Diagnostics: head diversity, calibration, predictive entropy, head masking."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def head_distance(z) -> float:
    """Average pairwise L2 distance between head representations.

    ``z`` has shape ``(N, M, d)`` (or ``(M, d)`` for one example). Distances
    are averaged over the M(M-1)/2 head pairs within each example, then over
    examples.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3:
        raise ValueError(f"expected (N, M, d) representations, got shape {z.shape}")
    m = z.shape[1]
    if m < 2:
        raise ValueError("head distance needs at least 2 heads")
    iu, ju = np.triu_indices(m, k=1)
    diff = z[:, iu, :] - z[:, ju, :]
    per_example = np.sqrt(np.sum(diff * diff, axis=-1)).mean(axis=1)
    return float(per_example.mean())


def _check_calibration_inputs(confidences, correct, n_bins):
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    flags = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != flags.shape:
        raise ValueError(f"length mismatch: {conf.size} confidences vs {flags.size} flags")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    return conf, flags


@dataclass(frozen=True)
class CalibrationBin:
    index: int
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


def calibration_bins(confidences, correct, n_bins: int = 10) -> list[CalibrationBin]:
    """Equal-width bins on [0, 1]; bin m covers (lo, hi], the first also holds 0."""
    conf, flags = _check_calibration_inputs(confidences, correct, n_bins)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # side="left" puts c in (edges[m], edges[m+1]]; clip sends c == 0 to bin 0.
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        acc = float(flags[sel].mean()) if count else 0.0
        mean_conf = float(conf[sel].mean()) if count else 0.0
        bins.append(CalibrationBin(b, float(edges[b]), float(edges[b + 1]), count, acc, mean_conf))
    return bins


def ece(confidences, correct, n_bins: int = 10) -> float:
    bins = calibration_bins(confidences, correct, n_bins)
    n = sum(b.count for b in bins)
    if n == 0:
        return 0.0
    return float(sum(b.count / n * abs(b.acc - b.conf) for b in bins))


def oe(confidences, correct, n_bins: int = 10) -> float:
    """Overconfidence error: bins weighted by conf * max(conf - acc, 0)."""
    bins = calibration_bins(confidences, correct, n_bins)
    n = sum(b.count for b in bins)
    if n == 0:
        return 0.0
    return float(sum(b.count / n * b.conf * max(b.conf - b.acc, 0.0) for b in bins))


def predictive_entropy(probs) -> np.ndarray:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    sums = p.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > 1e-6) | np.any(p < 0, axis=1))
    if bad.size:
        raise ValueError(f"row {int(bad[0])} is not a probability vector (sum {sums[bad[0]]:.8g})")
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=1)


def entropy_cdf(probs):
    """Empirical CDF of predictive entropy: ``(sorted_entropies, cumulative_fraction)``."""
    h = predictive_entropy(probs)
    order = np.argsort(h, kind="stable")
    h = h[order]
    frac = np.arange(1, h.size + 1) / h.size
    return h, frac


@dataclass(frozen=True)
class RedundancyRecord:
    head: int
    baseline: float
    masked: float

    @property
    def delta(self) -> float:
        return self.baseline - self.masked


def redundancy_report(model, split, batch_size: int = 256) -> list[RedundancyRecord]:
    """Accuracy drop from masking each head in turn (positive = head mattered)."""
    from .attention import mask_head
    from .trainer import evaluate

    if len(split.labels) == 0:
        raise ValueError("empty test set")
    baseline = evaluate(model, split, batch_size).accuracy
    records = []
    for i in range(model.n_heads):
        masked = evaluate(mask_head(model, i), split, batch_size).accuracy
        records.append(RedundancyRecord(i, baseline, masked))
    return records


def redundant_fraction(records, threshold: float = 0.005) -> float:
    """Fraction of heads whose masking changes accuracy by less than ``threshold``."""
    if not records:
        return 0.0
    return float(np.mean([abs(r.delta) < threshold for r in records]))


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def calibration_csv(bins, prefix=()) -> str:
    header = [*(k for k, _ in prefix), "bin", "count", "acc", "conf"]
    vals = [v for _, v in prefix]
    return _csv(header, ([*vals, b.index, b.count, b.acc, b.conf] for b in bins))


def entropy_cdf_csv(entropies, fractions, prefix=()) -> str:
    header = [*(k for k, _ in prefix), "entropy", "cdf"]
    vals = [v for _, v in prefix]
    return _csv(header, ([*vals, float(h), float(f)] for h, f in zip(entropies, fractions)))


def redundancy_csv(records, prefix=()) -> str:
    header = [*(k for k, _ in prefix), "head", "baseline", "masked", "delta"]
    vals = [v for _, v in prefix]
    return _csv(header, ([*vals, r.head, r.baseline, r.masked, r.delta] for r in records))
