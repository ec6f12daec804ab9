"""Representation-norm analysis: softmax entropy, its small-logit Taylor form,
entropy along a scaled family ``s * r`` of F7 vectors, and norm/entropy studies.

Logs are natural.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .io_utils import atomic_write_text, write_json
from .nn_core import Network


def entropy(probs) -> float | np.ndarray:
    """Shannon entropy with 0 * log 0 = 0; row-wise for 2-D input."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = terms.sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def taylor_entropy(z, atol: float = 1e-9) -> float:
    """Small-logit approximation ``-sum_i (1 + z_i)/N * (z_i - ln N)`` for centered ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if abs(z.mean()) > atol:
        raise ValueError(f"logits must be centered (mean {z.mean():.3g}); subtract the mean first")
    n = z.size
    return float(-np.sum((1 + z) / n * (z - np.log(n))))


@dataclass
class ScalingCurve:
    scales: np.ndarray
    exact_entropy: np.ndarray
    approx_entropy: np.ndarray
    small_scale_slope: float = float("nan")


def scaling_curve(r, W, scales, b=None) -> ScalingCurve:
    """Entropy of ``softmax(W.T @ (s * r))`` and its Taylor value along ``scales``.

    ``W`` has shape (len(r), N) as stored for F8. The F8 bias, if given, is added
    unscaled. The slope is a least-squares fit over the three smallest scales.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0) or np.any(np.diff(scales) <= 0):
        raise ValueError("scales must be positive and strictly ascending")
    r = np.asarray(r, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    exact, approx = [], []
    for s in scales:
        z = (s * r) @ W
        if b is not None:
            z = z + b
        exact.append(entropy(nn_core.softmax(z)))
        approx.append(taylor_entropy(z - z.mean()))
    exact = np.asarray(exact)
    slope = float("nan")
    if len(scales) >= 3:
        slope = float(np.polyfit(scales[:3], exact[:3], 1)[0])
    return ScalingCurve(scales, exact, np.asarray(approx), slope)


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties share their mean rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def correlation(xs, ys, kind: str = "pearson") -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    if kind == "spearman":
        x, y = _ranks(x), _ranks(y)
    elif kind != "pearson":
        raise ValueError(f"unknown correlation kind {kind!r}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("correlation is undefined for constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class NormEntropyRecord:
    image_id: str
    raw_norm: float
    entropy: float
    mean_intensity: float
    retrieval_rank: int | None = None


@dataclass
class NormEntropyStudy:
    records: list[NormEntropyRecord]
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "raw_norm", "entropy", "mean_intensity", "rank"])
        for r in self.records:
            w.writerow(
                [
                    r.image_id,
                    repr(float(r.raw_norm)),
                    repr(float(r.entropy)),
                    repr(float(r.mean_intensity)),
                    "" if r.retrieval_rank is None else r.retrieval_rank,
                ]
            )
        return buf.getvalue()

    def write(self, out_dir, stem: str = "norm_entropy"):
        from pathlib import Path

        atomic_write_text(Path(out_dir) / f"{stem}.csv", self.to_csv())
        write_json(Path(out_dir) / f"{stem}_summary.json", self.summary)


def norm_entropy_study(
    net: Network,
    images: np.ndarray,
    image_ids: list[str] | None = None,
    retrieval_ranks=None,
    batch_size: int = 256,
) -> NormEntropyStudy:
    """Per-image F7 norm, softmax entropy and mean intensity, plus summary correlations.

    With ``retrieval_ranks`` (``None`` for unranked images such as gallery entries)
    the summary also compares mean norm of rank-1 probes against misretrieved ones.
    """
    images = np.asarray(images)
    if image_ids is None:
        image_ids = [str(i) for i in range(len(images))]
    norms, ents = [], []
    for s in range(0, len(images), batch_size):
        fp = nn_core.forward(net, images[s : s + batch_size])
        r = fp.representation.astype(np.float64)
        norms.append(np.sqrt((r * r).sum(axis=1)))
        ents.append(entropy(nn_core.softmax(fp.logits.astype(np.float64))))
    norms = np.concatenate(norms)
    ents = np.atleast_1d(np.concatenate([np.atleast_1d(e) for e in ents]))
    intensity = images.reshape(len(images), -1).astype(np.float64).mean(axis=1)
    if retrieval_ranks is None:
        ranks = [None] * len(images)
    else:
        ranks = [None if r is None else int(r) for r in retrieval_ranks]
    records = [
        NormEntropyRecord(i, float(n), float(e), float(m), r)
        for i, n, e, m, r in zip(image_ids, norms, ents, intensity, ranks)
    ]
    summary = {"count": len(records), "num_classes": net.config.num_classes}

    def safe(xs, ys, kind="pearson"):
        try:
            return correlation(xs, ys, kind)
        except ValueError:
            return None

    summary["pearson_norm_entropy"] = safe(norms, ents)
    summary["spearman_norm_entropy"] = safe(norms, ents, "spearman")
    summary["pearson_intensity_norm"] = safe(intensity, norms)
    ranked = np.asarray([r is not None for r in ranks])
    if ranked.any():
        rk = np.asarray([r for r in ranks if r is not None])
        nr = norms[ranked]
        hit = rk == 1
        summary["mean_norm_rank1"] = float(nr[hit].mean()) if hit.any() else None
        summary["mean_norm_rank_gt1"] = float(nr[~hit].mean()) if (~hit).any() else None
        summary["spearman_rank_norm"] = safe(rk, nr, "spearman")
    return NormEntropyStudy(records, summary)


def l6_activation_map(net: Network, image: np.ndarray) -> np.ndarray:
    """Channel-summed activations of the last locally-connected layer for one image."""
    last_local = max(i for i, l in enumerate(net.config.layers) if l.kind == nn_core.LOCAL)
    fp = nn_core.forward(net, np.asarray(image)[None], upto=last_local)
    return fp.outputs[last_local][0].sum(axis=-1)


def write_activation_pgm(path, amap: np.ndarray) -> None:
    from .data import write_pgm

    span = amap.max() - amap.min()
    write_pgm(path, (amap - amap.min()) / span if span > 0 else np.zeros_like(amap))
