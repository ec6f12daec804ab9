"""Probe-gallery and pair-verification protocols.

Closed set: every probe has exactly one mate in a single-image-per-identity
gallery, scored by cumulative Rank-k accuracy. Open set: impostor probes with no
gallery mate calibrate a similarity threshold at a requested false alarm rate;
DIR is the share of genuine probes that are both correct at rank 1 and above that
threshold. Verification trains a linear hinge classifier on chi-square distance
vectors of image pairs.

Identification similarity is the cosine of the embeddings, computed with a fixed
accumulation order (see ``linalg``) so results are exactly reproducible.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .hinge import fit_hinge
from .io_utils import atomic_write_text, write_json
from .linalg import ordered_dot_matrix
from .representation import EmbeddingSet

CHI2_EPS = 1e-12


@dataclass
class ProbeGallerySplit:
    gallery_ids: list[str]  # identity per gallery row
    gallery: np.ndarray  # (G, d)
    probe_ids: list[str]  # identity per genuine probe
    probes: np.ndarray  # (P, d)
    impostors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def validate(self, open_set: bool = False):
        if len(set(self.gallery_ids)) != len(self.gallery_ids):
            raise ValueError("gallery must hold one embedding per identity")
        known = set(self.gallery_ids)
        missing = [p for p in self.probe_ids if p not in known]
        if missing:
            raise ValueError(f"probe identity {missing[0]!r} has no gallery mate")
        if open_set and len(self.impostors) == 0:
            raise ValueError("open-set evaluation needs impostor probes")


@dataclass
class VerificationPair:
    a: np.ndarray
    b: np.ndarray
    same: bool


def _percent(count, total) -> float:
    return 100.0 * int(count) / total


def cosine_scores(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Similarity matrix of already-normalized embeddings (degenerate rows score 0)."""
    return ordered_dot_matrix(probes, gallery)


def _gallery_order(gallery_ids: list[str]) -> np.ndarray:
    """Column permutation sorting gallery entries by ascending identity id."""
    return np.asarray(sorted(range(len(gallery_ids)), key=lambda i: gallery_ids[i]))


def mate_ranks(scores: np.ndarray, gallery_ids: list[str], probe_ids: list[str]) -> np.ndarray:
    """1-based rank of each probe's true mate; ties go to the lower identity id."""
    pos = {g: i for i, g in enumerate(gallery_ids)}
    col = np.asarray([pos[p] for p in probe_ids])
    mate = scores[np.arange(len(probe_ids)), col]
    gid = np.asarray(gallery_ids, dtype=object)
    higher = (scores > mate[:, None]).sum(axis=1)
    tied_before = np.array(
        [
            np.sum((scores[i] == mate[i]) & (gid < probe_ids[i]))
            for i in range(len(probe_ids))
        ]
    )
    return 1 + higher + tied_before


def top1(scores: np.ndarray, gallery_ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Best gallery column per row, ties resolved by ascending identity id."""
    order = _gallery_order(gallery_ids)
    best = order[np.argmax(scores[:, order], axis=1)]
    return best, scores[np.arange(len(scores)), best]


def closed_set_eval(split: ProbeGallerySplit, ranks=(1, 10)) -> dict[int, float]:
    """Cumulative identification accuracy (percent) at each requested rank."""
    split.validate()
    r = mate_ranks(cosine_scores(split.probes, split.gallery), split.gallery_ids, split.probe_ids)
    return {int(k): _percent(np.sum(r <= k), len(r)) for k in sorted(ranks)}


def far_threshold(impostor_top: np.ndarray, far: float) -> float:
    """Higher empirical quantile of the impostor top-1 scores.

    Returns the smallest observed impostor score ``t`` such that the share of
    impostors with score >= t does not exceed ``far``. When no observed score
    qualifies the threshold moves just above the maximum, rejecting everyone.
    """
    if not 0 < far <= 1:
        raise ValueError("FAR levels must lie in (0, 1]")
    s = np.sort(np.asarray(impostor_top, dtype=np.float64))
    allowed = math.floor(far * len(s) + 1e-9)
    values = np.unique(s)
    accepted = len(s) - np.searchsorted(s, values, side="left")
    ok = np.flatnonzero(accepted <= allowed)
    if len(ok) == 0:
        return float(np.nextafter(s[-1], np.inf))
    return float(values[ok[0]])


def open_set_eval(split: ProbeGallerySplit, far_levels=(0.01, 0.1, 1.0)) -> dict[float, float]:
    """DIR (percent) at each false alarm rate."""
    return open_set_details(split, far_levels)["dir"]


def open_set_details(split: ProbeGallerySplit, far_levels=(0.01, 0.1, 1.0)) -> dict:
    split.validate(open_set=True)
    best, sim = top1(cosine_scores(split.probes, split.gallery), split.gallery_ids)
    correct = np.asarray([split.gallery_ids[b] for b in best], dtype=object) == np.asarray(
        split.probe_ids, dtype=object
    )
    _, imp_sim = top1(cosine_scores(split.impostors, split.gallery), split.gallery_ids)
    dirs, thresholds, achieved = {}, {}, {}
    for f in far_levels:
        t = far_threshold(imp_sim, f)
        dirs[f] = _percent(np.sum(correct & (sim >= t)), len(sim))
        thresholds[f] = t
        achieved[f] = float(np.mean(imp_sim >= t))
    return {"dir": dirs, "threshold": thresholds, "achieved_far": achieved}


# ---------------------------------------------------------------- verification


def chi2_vector(a, b, eps: float = CHI2_EPS) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (a - b) ** 2 / (a + b + eps)


@dataclass
class LinearVerifier:
    w: np.ndarray
    b: float
    C: float
    train_objective: float

    def decision(self, pairs: list[VerificationPair]) -> np.ndarray:
        X = np.stack([chi2_vector(p.a, p.b) for p in pairs])
        return X @ self.w + self.b


def train_verifier(pairs: list[VerificationPair], C: float = 1.0, epochs: int = 300) -> LinearVerifier:
    """Hinge-loss classifier over chi-square vectors; lambda = 1 / (C * num_pairs)."""
    y = np.asarray([1.0 if p.same else -1.0 for p in pairs])
    if len(np.unique(y)) < 2:
        raise ValueError("verifier needs both same and not-same pairs")
    X = np.stack([chi2_vector(p.a, p.b) for p in pairs])
    w, b, _, obj = fit_hinge(X, y, lam=1.0 / (C * len(pairs)), epochs=epochs)
    return LinearVerifier(w, b, C, obj)


def verify(clf: LinearVerifier, pairs: list[VerificationPair]) -> tuple[float, np.ndarray]:
    """Accuracy (percent) and signed decision values."""
    scores = clf.decision(pairs)
    labels = np.asarray([p.same for p in pairs])
    return 100.0 * float(np.mean((scores > 0) == labels)), scores


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold maximizing training accuracy of ``score >= t`` (ties: lowest t)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    cands = np.unique(scores)
    cands = np.concatenate([cands, [np.nextafter(cands[-1], np.inf)]])
    acc = [np.mean((scores >= t) == labels) for t in cands]
    return float(cands[int(np.argmax(acc))])


def threshold_accuracy(train_scores, train_labels, test_scores, test_labels) -> float:
    t = best_threshold(train_scores, train_labels)
    return 100.0 * float(np.mean((np.asarray(test_scores) >= t) == np.asarray(test_labels)))


def roc_curve(scores_same, scores_notsame, points: int | None = None) -> list[tuple[float, float]]:
    """(FAR, TAR) points sorted by FAR; a pair is accepted when score >= threshold."""
    same = np.sort(np.asarray(scores_same, dtype=np.float64))
    diff = np.sort(np.asarray(scores_notsame, dtype=np.float64))
    if len(same) == 0 or len(diff) == 0:
        raise ValueError("both score lists must be non-empty")
    thresholds = np.unique(np.concatenate([same, diff]))[::-1]
    if points is not None and points < len(thresholds):
        pick = np.unique(np.round(np.linspace(0, len(thresholds) - 1, points)).astype(int))
        thresholds = thresholds[pick]
    tar = 1 - np.searchsorted(same, thresholds, side="left") / len(same)
    far = 1 - np.searchsorted(diff, thresholds, side="left") / len(diff)
    curve = [(0.0, 0.0)] + list(zip(far.tolist(), tar.tolist())) + [(1.0, 1.0)]
    return sorted(set(curve))


# ---------------------------------------------------------------- splits and pairs


def closed_rows(es: EmbeddingSet, identity_of: dict[str, str]):
    """Row indices for a closed split: the first image of each identity (in id order)
    is the gallery entry, the rest are probes. Returns (gallery ids, gallery rows,
    probe ids, probe rows)."""
    groups: dict[str, list[int]] = {}
    for i, iid in enumerate(es.image_ids):
        groups.setdefault(identity_of[iid], []).append(i)
    g_ids, g_rows, p_ids, p_rows = [], [], [], []
    for ident in sorted(groups):
        rows = sorted(groups[ident], key=lambda r: es.image_ids[r])
        g_ids.append(ident)
        g_rows.append(rows[0])
        for r in rows[1:]:
            p_ids.append(ident)
            p_rows.append(r)
    return g_ids, g_rows, p_ids, p_rows


def closed_split(es: EmbeddingSet, identity_of: dict[str, str]) -> ProbeGallerySplit:
    g_ids, g_rows, p_ids, p_rows = closed_rows(es, identity_of)
    return ProbeGallerySplit(g_ids, es.vectors[g_rows], p_ids, es.vectors[p_rows])


def open_split(es: EmbeddingSet, identity_of: dict[str, str], gallery_fraction: float = 0.5):
    """Gallery identities are the first ``gallery_fraction`` in id order; the rest are impostors."""
    idents = sorted({identity_of[i] for i in es.image_ids})
    n_gal = max(1, int(round(gallery_fraction * len(idents))))
    gallery_set = set(idents[:n_gal])
    keep = [i for i, iid in enumerate(es.image_ids) if identity_of[iid] in gallery_set]
    imp = [i for i, iid in enumerate(es.image_ids) if identity_of[iid] not in gallery_set]
    closed = closed_split(es.take(keep), identity_of)
    closed.impostors = es.vectors[imp]
    return closed


def make_pairs(
    es: EmbeddingSet, identity_of: dict[str, str], n_pairs: int, rng_seed: int = 0
) -> tuple[list[int], list[int], np.ndarray]:
    """Balanced same/not-same index pairs drawn with a seeded generator."""
    rng = np.random.default_rng(rng_seed)
    groups: dict[str, list[int]] = {}
    for i, iid in enumerate(es.image_ids):
        groups.setdefault(identity_of[iid], []).append(i)
    names = sorted(g for g in groups)
    multi = [g for g in names if len(groups[g]) > 1]
    if not multi or len(names) < 2:
        raise ValueError("need identities with >= 2 images and >= 2 identities")
    ia, ib, same = [], [], []
    for k in range(n_pairs):
        if k % 2 == 0:
            g = groups[multi[rng.integers(len(multi))]]
            a, b = rng.choice(len(g), 2, replace=False)
            ia.append(g[a]), ib.append(g[b]), same.append(True)
        else:
            g1, g2 = rng.choice(len(names), 2, replace=False)
            ia.append(groups[names[g1]][rng.integers(len(groups[names[g1]]))])
            ib.append(groups[names[g2]][rng.integers(len(groups[names[g2]]))])
            same.append(False)
    return ia, ib, np.asarray(same)


def pairs_from(vectors: np.ndarray, ia, ib, same) -> list[VerificationPair]:
    return [VerificationPair(vectors[a], vectors[b], bool(s)) for a, b, s in zip(ia, ib, same)]


def stratified_folds(same, folds: int) -> np.ndarray:
    """Fold index per pair, dealt round-robin within each label so every fold holds both."""
    same = np.asarray(same, dtype=bool)
    fold_of = np.empty(len(same), dtype=int)
    for label in (True, False):
        idx = np.flatnonzero(same == label)
        fold_of[idx] = np.arange(len(idx)) % folds
    return fold_of


def verification_protocol(vectors, ia, ib, same, folds: int = 2, C: float = 1.0) -> dict:
    """k-fold verifier accuracy: train on k-1 folds of pairs, score the held-out fold."""
    pairs = pairs_from(vectors, ia, ib, same)
    fold_of = stratified_folds(same, folds)
    accs, scores = [], np.zeros(len(pairs))
    for f in range(folds):
        train = [p for p, k in zip(pairs, fold_of) if k != f]
        test = [p for p, k in zip(pairs, fold_of) if k == f]
        clf = train_verifier(train, C)
        acc, s = verify(clf, test)
        accs.append(acc)
        scores[fold_of == f] = s
    return {"accuracy": float(np.mean(accs)), "fold_accuracy": accs, "scores": scores}


def similarity_protocol(scores, same, folds: int = 2) -> float:
    """k-fold accuracy of a threshold on a per-pair similarity score."""
    scores = np.asarray(scores)
    same = np.asarray(same, dtype=bool)
    fold_of = stratified_folds(same, folds)
    accs = [
        threshold_accuracy(scores[fold_of != f], same[fold_of != f], scores[fold_of == f], same[fold_of == f])
        for f in range(folds)
    ]
    return float(np.mean(accs))


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    model_id: str = ""
    verification_accuracy: float | None = None
    roc: list[tuple[float, float]] = field(default_factory=list)
    rank_curve: dict[int, float] = field(default_factory=dict)
    dir_table: dict[float, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "verification_accuracy": self.verification_accuracy,
            "rank_curve": {str(k): v for k, v in sorted(self.rank_curve.items())},
            "dir_table": {repr(float(k)): v for k, v in sorted(self.dir_table.items())},
            "roc_points": len(self.roc),
            **self.extra,
        }

    def write(self, out_dir, stem: str) -> list[str]:
        """Write ``<stem>.json`` plus the roc/rank/dir CSV files; returns file names."""
        from pathlib import Path

        out = Path(out_dir)
        write_json(out / f"{stem}.json", self.to_dict())
        tables = {
            "roc": (("far", "tar"), self.roc),
            "rank": (("rank", "accuracy"), sorted(self.rank_curve.items())),
            "dir": (("far", "dir"), sorted(self.dir_table.items())),
        }
        names = [f"{stem}.json"]
        for suffix, (cols, rows) in tables.items():
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
            atomic_write_text(out / f"{stem}_{suffix}.csv", buf.getvalue())
            names.append(f"{stem}_{suffix}.csv")
        return names
