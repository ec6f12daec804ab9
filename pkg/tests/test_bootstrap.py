import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import nearest_oracle
from webface.bootstrap import (
    BootstrapPlan,
    BootstrappedDataset,
    HyperplaneModel,
    bank_from_bytes,
    bank_to_bytes,
    build_bootstrap,
    default_negatives,
    hardness_report,
    load_bank,
    model_hash,
    model_similarity,
    nearest_models,
    save_bank,
    train_hyperplanes,
)
from webface.representation import EmbeddingSet, normalize_rows


def hp(ident, w, b=0.0):
    return HyperplaneModel(ident, np.asarray(w, dtype=np.float64), b)


def random_pool(rng, n, d=16, prefix="m"):
    ids = [f"{prefix}{i:05d}" for i in rng.permutation(n)]
    return [hp(i, rng.standard_normal(d), float(rng.standard_normal())) for i in ids]


# ---------------------------------------------------------------- similarity


def test_similarity_examples():
    assert model_similarity(hp("a", [1, 0]), hp("b", [1, 1])) == pytest.approx(0.70710678118, abs=1e-10)
    assert model_similarity(hp("a", [0.3, -2.0]), hp("a", [0.3, -2.0])) == pytest.approx(1.0, abs=1e-15)
    assert model_similarity(hp("a", [0.3, -2.0]), hp("b", [-0.3, 2.0])) == pytest.approx(-1.0, abs=1e-15)


def test_similarity_zero_norm_rejected():
    with pytest.raises(ValueError):
        model_similarity(hp("a", [0, 0]), hp("b", [1, 0]))


def test_bias_toggle():
    a, b = hp("a", [1, 0], 5.0), hp("b", [1, 0], -5.0)
    assert model_similarity(a, b) == pytest.approx(1.0)
    assert model_similarity(a, b, include_bias=True) < 0


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
)
def test_similarity_symmetric_and_bounded(w1, w2):
    if np.linalg.norm(w1) < 1e-3 or np.linalg.norm(w2) < 1e-3:
        return
    s = model_similarity(hp("a", w1), hp("b", w2))
    assert s == model_similarity(hp("b", w2), hp("a", w1))
    assert -1 - 1e-12 <= s <= 1 + 1e-12


# ---------------------------------------------------------------- search


@pytest.mark.parametrize("block_rows", [1, 7, 4096])
def test_nearest_matches_oracle(rng, block_rows):
    pool = random_pool(rng, 120)
    seeds = [pool[i] for i in (0, 5, 17)] + random_pool(rng, 2, prefix="s")
    got = nearest_models(seeds, pool, 10, block_rows=block_rows)
    want = nearest_oracle(
        [s.identity_id for s in seeds], [s.w for s in seeds], [m.identity_id for m in pool],
        [m.w for m in pool], 10,
    )
    for g, (ids, sims) in zip(got, want):
        assert g.neighbor_ids == ids
        assert g.similarities == sims  # bitwise: same accumulation order


def test_similarity_values_match_scalar_reference(rng):
    pool = random_pool(rng, 30)
    hood = nearest_models(pool[:1], pool, 29)[0]
    by_id = {m.identity_id: m for m in pool}
    for nid, s in zip(hood.neighbor_ids, hood.similarities):
        assert s == model_similarity(pool[0], by_id[nid])


def test_duplicate_of_seed_ranks_first(rng):
    pool = random_pool(rng, 20)
    twin = hp("zz_twin", pool[3].w * 2.5)
    hood = nearest_models([pool[3]], pool + [twin], 5)[0]
    assert hood.neighbor_ids[0] == "zz_twin"
    assert hood.similarities[0] == pytest.approx(1.0, abs=1e-12)
    assert pool[3].identity_id not in hood.neighbor_ids


def test_ties_by_ascending_id():
    pool = [hp("c", [1, 0]), hp("a", [1, 0]), hp("b", [1, 0]), hp("seed", [1, 0])]
    assert nearest_models([pool[3]], pool, 3)[0].neighbor_ids == ["a", "b", "c"]


def test_k_bounds(rng):
    pool = random_pool(rng, 10)
    with pytest.raises(ValueError):
        nearest_models(pool[:1], pool, 10)
    with pytest.raises(ValueError):
        nearest_models(pool[:1], pool, 0)
    assert len(nearest_models(pool[:1], pool, 9)[0].neighbor_ids) == 9


# ---------------------------------------------------------------- bootstrap


def test_all_seeds_select_everything(rng):
    pool = random_pool(rng, 15)
    ds = build_bootstrap(pool, BootstrapPlan(num_seeds=15, neighbors_per_seed=14))
    assert sorted(ds.selected_identities) == sorted(m.identity_id for m in pool)


def test_selected_is_union(rng):
    pool = random_pool(rng, 40)
    ds = build_bootstrap(pool, BootstrapPlan(num_seeds=4, neighbors_per_seed=6, rng_seed=3))
    union = set(ds.seed_ids)
    for h in ds.neighborhoods.values():
        union |= set(h.neighbor_ids)
    assert set(ds.selected_identities) == union
    assert len(ds.selected_identities) == len(union)
    assert len(set(ds.seed_ids)) == 4


def test_cluster_geometry_confines_selection(rng):
    a = [hp(f"a{i:02d}", np.r_[10.0, 0, 0] + rng.standard_normal(3)) for i in range(20)]
    b = [hp(f"b{i:02d}", np.r_[-10.0, 0, 0] + rng.standard_normal(3)) for i in range(20)]
    seeds = a[:3]
    hoods = nearest_models(seeds, a + b, 10)
    for h in hoods:
        assert all(i.startswith("a") for i in h.neighbor_ids)


def test_plan_validation():
    BootstrapPlan(100, 1000).validate(10_000_000)
    with pytest.raises(ValueError):
        BootstrapPlan(5, 10).validate(10)
    with pytest.raises(ValueError):
        BootstrapPlan(11, 2).validate(10)
    with pytest.raises(ValueError):
        BootstrapPlan(0, 2).validate(10)


def test_bootstrap_is_pure(rng):
    pool = random_pool(rng, 50)
    plan = BootstrapPlan(5, 7, rng_seed=11)
    d1, d2 = build_bootstrap(pool, plan), build_bootstrap(pool, plan)
    assert d1.provenance == d2.provenance and d1.to_json() == d2.to_json()
    assert d1.provenance["model_hash"] == model_hash(pool)


@pytest.mark.parametrize("seed", range(3))
def test_more_neighbors_never_removes(seed):
    pool = random_pool(np.random.default_rng(seed), 60)
    prev = set()
    for k in (1, 5, 20, 59):
        cur = set(build_bootstrap(pool, BootstrapPlan(6, k, rng_seed=seed)).selected_identities)
        assert prev <= cur
        prev = cur


def test_manifest_round_trip(rng):
    ds = build_bootstrap(random_pool(rng, 12), BootstrapPlan(2, 3))
    back = BootstrappedDataset.from_json(ds.to_json())
    assert back.to_json() == ds.to_json()


# ---------------------------------------------------------------- hyperplanes


def test_opposite_identities_separated():
    e = np.array([0.6, 0.8])
    models = train_hyperplanes({"p": np.tile(e, (5, 1)), "q": np.tile(-e, (5, 1))})
    for m, sign in zip(models, (1, -1)):
        assert sign * (e @ m.w + m.b) > 0
        assert -sign * (e @ m.w + m.b) < 0


def test_hyperplanes_deterministic(rng):
    groups = {f"p{i}": rng.random((4, 6)) for i in range(5)}
    a = train_hyperplanes(groups, rng_seed=2)
    b = train_hyperplanes(groups, rng_seed=2)
    assert bank_to_bytes(a) == bank_to_bytes(b)


def test_objective_decreases_on_synthetic_identities(rng):
    centers = normalize_rows(rng.random((20, 16)))[0]
    groups = {
        f"p{i:02d}": normalize_rows(np.clip(c + 0.15 * rng.standard_normal((10, 16)), 0, None))[0]
        for i, c in enumerate(centers)
    }
    models = train_hyperplanes(groups)
    better = [m.final_objective < m.initial_objective for m in models]
    assert np.mean(better) >= 0.9
    assert all(np.linalg.norm(m.w) > 0 for m in models)


def test_negative_sampling_default():
    assert default_negatives(3) == 30
    assert default_negatives(80) == 500
    models = train_hyperplanes({"a": np.ones((2, 3)), "b": np.zeros((4, 3)) + 0.1})
    assert models[0].num_pos == 2 and models[0].num_neg == 4


def test_empty_identity_skipped(caplog):
    with caplog.at_level(logging.WARNING):
        models = train_hyperplanes({"a": np.ones((2, 3)), "e": np.zeros((0, 3)), "b": -np.ones((2, 3))})
    assert [m.identity_id for m in models] == ["a", "b"]
    assert "e" in caplog.text


def test_bank_round_trip(tmp_path, rng):
    models = train_hyperplanes({f"p{i}": rng.random((3, 5)) for i in range(4)})
    save_bank(models, tmp_path / "bank.bin")
    back = load_bank(tmp_path / "bank.bin")
    assert bank_to_bytes(back) == (tmp_path / "bank.bin").read_bytes()
    for m, n in zip(models, back):
        assert m.identity_id == n.identity_id and m.b == n.b
        assert m.w.tobytes() == n.w.tobytes()
    assert bank_from_bytes(bank_to_bytes(back))[2].num_pos == 3


# ---------------------------------------------------------------- hardness


def toy_embeddings(rng, n_id=12, per=3):
    ids, ident = [], {}
    for p in range(n_id):
        for j in range(per):
            iid = f"p{p:02d}_{j}"
            ids.append(iid)
            ident[iid] = f"p{p:02d}"
    return EmbeddingSet(*normalize_rows(rng.random((len(ids), 6))), ids), ident


def test_hardness_control_equal_to_selection(rng):
    es, ident = toy_embeddings(rng)
    ds = BootstrappedDataset(["p00"], {}, ["p00", "p03", "p05"])
    rep = hardness_report(ds, es, ident, control=["p00", "p03", "p05"])
    assert rep["bootstrap_rank1"] == rep["control_rank1"]


def test_hardness_control_disjoint_when_possible(rng):
    es, ident = toy_embeddings(rng)
    ds = BootstrappedDataset(["p00"], {}, ["p00", "p03", "p05"])
    rep = hardness_report(ds, es, ident, rng_seed=4)
    assert rep["overlap"] == [] and len(rep["control_identities"]) == 3
