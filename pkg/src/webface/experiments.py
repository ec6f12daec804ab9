"""Desk-scale trend experiments on synthetic faces.

Each function runs one seeded experiment end to end and returns a plain dict of
the measured quantities, so scripts and the acceptance suite share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn_core
from .bootstrap import BootstrapPlan, build_bootstrap, hardness_report, train_hyperplanes
from .data import FaceDataset, Nuisance, SynthConfig, generate_synthetic
from .diagnostics import norm_entropy_study
from .evaluation import (
    closed_set_eval,
    closed_rows,
    closed_split,
    cosine_scores,
    make_pairs,
    mate_ranks,
    similarity_protocol,
)
from .linalg import ordered_pair_dots
from .nn_core import TrainConfig
from .representation import binarize_set, compress_retrain, expand_network, extract, hamming_similarity


def identity_map(ds: FaceDataset) -> dict[str, str]:
    return dict(zip(ds.image_ids, ds.identity_of))


def train_on(ds, groups, bottleneck, tc, conv_filters=(8, 16), local_filters=16, net=None):
    """Train a fresh default network (or ``net``) on the identities in ``groups``."""
    names = sorted(groups)
    x, y, _ = ds.gather(groups, names)
    if net is None:
        cfg = nn_core.default_config(
            bottleneck, len(names), ds.dims[0], tuple(conv_filters), local_filters
        )
        net = nn_core.build_network(cfg, tc.rng_seed)
    return nn_core.train(net, x, y, tc)


def rank1_on(net, ds, groups) -> float:
    x, _, ids = ds.gather(groups)
    return closed_set_eval(closed_split(extract(net, x, ids), identity_map(ds)), (1,))[1]


# ---------------------------------------------------------------- bottleneck trend


@dataclass
class BottleneckExperiment:
    num_identities: int = 80
    images_per_identity: int = 20
    target_fraction: float = 0.375
    domain_shift: float = 1.0
    widest: int = 256
    dims: tuple = (64, 32, 16)
    base_epochs: int = 15
    retrain_epochs: int = 15
    learning_rate: float = 0.02


def bottleneck_trend(seed: int, exp: BottleneckExperiment = BottleneckExperiment()) -> dict:
    """Target Rank-1 of the widest network and of warm-started narrower bottlenecks."""
    ds = generate_synthetic(
        SynthConfig(
            num_identities=exp.num_identities,
            images_per_identity=exp.images_per_identity,
            target_fraction=exp.target_fraction,
            domain_shift=exp.domain_shift,
            rng_seed=seed,
        )
    )
    src = ds.split("source_train")
    names = sorted(src)
    x, y, _ = ds.gather(src, names)
    tc = TrainConfig(learning_rate=exp.learning_rate, epochs=exp.base_epochs, rng_seed=seed)
    base, _ = train_on(ds, src, exp.widest, tc)
    out = {"widest": exp.widest, "rank1": {exp.widest: rank1_on(base, ds, ds.split("target"))}}
    for d in exp.dims:
        small, _ = compress_retrain(base, d, x, y, replace(tc, epochs=exp.retrain_epochs))
        out["rank1"][d] = rank1_on(small, ds, ds.split("target"))
    narrower = [out["rank1"][d] for d in exp.dims]
    out["best_narrower"] = max(narrower)
    out["passed"] = out["best_narrower"] >= out["rank1"][exp.widest]
    return out


# ---------------------------------------------------------------- binarization


@dataclass
class BinarizationExperiment:
    num_identities: int = 80
    images_per_identity: int = 20
    target_fraction: float = 0.375
    bottleneck: int = 256
    epochs: int = 15
    learning_rate: float = 0.02
    num_pairs: int = 2000


def binarization_drop(seed: int, exp: BinarizationExperiment = BinarizationExperiment()) -> dict:
    """Pair-verification accuracy with cosine scores versus Hamming scores of sign bits."""
    ds = generate_synthetic(
        SynthConfig(
            num_identities=exp.num_identities,
            images_per_identity=exp.images_per_identity,
            target_fraction=exp.target_fraction,
            rng_seed=seed,
        )
    )
    tc = TrainConfig(learning_rate=exp.learning_rate, epochs=exp.epochs, rng_seed=seed)
    net, _ = train_on(ds, ds.split("source_train"), exp.bottleneck, tc)
    x, _, ids = ds.gather(ds.split("target"))
    es = extract(net, x, ids)
    ia, ib, same = make_pairs(es, identity_map(ds), exp.num_pairs, rng_seed=seed)
    cos = ordered_pair_dots(es.vectors[ia], es.vectors[ib])
    bits = binarize_set(es)
    ham = hamming_similarity(bits[ia], bits[ib])
    acc_cos = similarity_protocol(cos, same)
    acc_ham = similarity_protocol(ham, same)
    return {"cosine_accuracy": acc_cos, "hamming_accuracy": acc_ham, "drop": acc_cos - acc_ham}


# ---------------------------------------------------------------- norm and entropy


@dataclass
class NormEntropyExperiment:
    num_identities: int = 50
    images_per_identity: int = 24
    test_fraction: float = 0.5
    occlusion_prob: float = 0.3
    bottleneck: int = 64
    epochs: int = 15
    learning_rate: float = 0.02


def norm_entropy_link(seed: int, exp: NormEntropyExperiment = NormEntropyExperiment()) -> dict:
    """Norm/entropy correlation and retrieval-rank norms on held-out images of training identities."""
    ds = generate_synthetic(
        SynthConfig(
            num_identities=exp.num_identities,
            images_per_identity=exp.images_per_identity,
            test_fraction=exp.test_fraction,
            nuisance=Nuisance(occlusion_prob=exp.occlusion_prob),
            rng_seed=seed,
        )
    )
    tc = TrainConfig(learning_rate=exp.learning_rate, epochs=exp.epochs, rng_seed=seed)
    net, _ = train_on(ds, ds.split("source_train"), exp.bottleneck, tc)
    held = ds.split("source_test")
    x, _, ids = ds.gather(held)
    es = extract(net, x, ids)
    g_ids, g_rows, p_ids, probe_rows = closed_rows(es, identity_map(ds))
    ranks = mate_ranks(cosine_scores(es.vectors[probe_rows], es.vectors[g_rows]), g_ids, p_ids)
    rank_of = dict(zip(probe_rows, ranks.tolist()))
    study = norm_entropy_study(net, x, ids, [rank_of.get(i) for i in range(len(ids))])
    summary = dict(study.summary)
    summary["num_held_out"] = len(ids)
    summary["num_probes"] = len(probe_rows)
    occl = np.array([ds.occluded[ds.index_of(i)] for i in ids])
    all_norms = np.array([r.raw_norm for r in study.records])
    summary["mean_norm_occluded"] = float(all_norms[occl].mean()) if occl.any() else None
    summary["mean_norm_clean"] = float(all_norms[~occl].mean())
    return summary


# ---------------------------------------------------------------- bootstrap hardness / expansion


@dataclass
class BootstrapExperiment:
    num_identities: int = 160
    images_per_identity: int = 12
    pool_fraction: float = 0.5
    target_fraction: float = 0.2
    num_clusters: int = 8
    cluster_spread: float = 0.5
    bottleneck: int = 64
    epochs: int = 12
    learning_rate: float = 0.02
    num_seeds: int = 2
    neighbors_per_seed: int = 12
    hyperplane_epochs: int = 200
    # expansion stage
    expanded_bottleneck: int = 64
    filter_multiplier: int = 2
    expand_epochs: int = 15


@dataclass
class ExpansionExperiment(BootstrapExperiment):
    """A larger pool with more images per identity, so the bootstrapped set can feed a wider net."""

    num_identities: int = 240
    images_per_identity: int = 24
    pool_fraction: float = 0.6
    target_fraction: float = 0.15
    num_seeds: int = 4
    neighbors_per_seed: int = 20
    expand_epochs: int = 60


def _bootstrap_world(seed: int, exp: BootstrapExperiment):
    ds = generate_synthetic(
        SynthConfig(
            num_identities=exp.num_identities,
            images_per_identity=exp.images_per_identity,
            pool_fraction=exp.pool_fraction,
            target_fraction=exp.target_fraction,
            num_clusters=exp.num_clusters,
            cluster_spread=exp.cluster_spread,
            rng_seed=seed,
        )
    )
    tc = TrainConfig(learning_rate=exp.learning_rate, epochs=exp.epochs, rng_seed=seed)
    base, _ = train_on(ds, ds.split("source_train"), exp.bottleneck, tc)
    pool = ds.split("pool")
    x, _, ids = ds.gather(pool)
    es = extract(base, x, ids)
    rows: dict[str, list[int]] = {}
    ident = identity_map(ds)
    for r, iid in enumerate(ids):
        rows.setdefault(ident[iid], []).append(r)
    groups = {k: es.vectors[v] for k, v in rows.items()}
    models = train_hyperplanes(groups, rng_seed=seed, epochs=exp.hyperplane_epochs)
    plan = BootstrapPlan(exp.num_seeds, exp.neighbors_per_seed, rng_seed=seed)
    boot = build_bootstrap(models, plan)
    return ds, base, es, boot


def bootstrap_hardness(seed: int, exp: BootstrapExperiment = BootstrapExperiment()) -> dict:
    """Baseline Rank-1 inside the bootstrapped identities versus a disjoint random control."""
    ds, _, es, boot = _bootstrap_world(seed, exp)
    rep = hardness_report(boot, es, identity_map(ds), rng_seed=seed)
    rep["passed"] = rep["bootstrap_rank1"] < rep["control_rank1"]
    return rep


def expansion_benefit(seed: int, exp: BootstrapExperiment = ExpansionExperiment()) -> dict:
    """Target Rank-1 of the widened network versus the same-width network, both trained on the
    bootstrapped identities with the baseline's convolutional front end frozen."""
    ds, base, _, boot = _bootstrap_world(seed, exp)
    db2 = ds.subset(boot.selected_identities, "pool")
    names = sorted(db2)
    x, y, _ = ds.gather(db2, names)
    tc = TrainConfig(learning_rate=exp.learning_rate, epochs=exp.expand_epochs, rng_seed=seed)
    out = {"num_identities": len(names)}
    for label, mult in (("expanded", exp.filter_multiplier), ("unexpanded", 1)):
        net = expand_network(base, mult, exp.expanded_bottleneck, len(names), rng_seed=seed + 1)
        net, _ = nn_core.train(net, x, y, tc)
        out[label] = rank1_on(net, ds, ds.split("target"))
    out["baseline"] = rank1_on(base, ds, ds.split("target"))
    return out
