"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is printed in the
terminal summary (and to stdout under ``-s``) before its assertion runs.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, tiny_config
from gradcheck import perturb_biases, worst_relative_error
from oracles import dir_oracle, nearest_oracle, rank_curve_oracle
from webface import experiments as E
from webface import nn_core
from webface.bootstrap import HyperplaneModel, nearest_models
from webface.diagnostics import entropy, taylor_entropy
from webface.evaluation import ProbeGallerySplit, closed_set_eval, open_set_eval
from webface.nn_core import CONV, FC, LOCAL, MAXPOOL
from webface.pipeline import demo_config, run_pipeline
from webface.representation import embeddings_from_bytes, embeddings_to_bytes, normalize_rows


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def tree(root) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- 1. gradients


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    kinds = {spec.kind for spec in tiny_config().layers}
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        net = nn_core.build_network(tiny_config(), seed, np.float64)
        perturb_biases(net, rng)
        x = rng.random((3, 12, 12, 1))
        y = rng.integers(0, 4, 3)
        worst = max(worst, max(worst_relative_error(net, x, y, rng, per_tensor=20).values()))
    elapsed = time.perf_counter() - t0
    ok = kinds == {CONV, MAXPOOL, LOCAL, FC} and worst < 1e-4 and elapsed < 60
    verdict(1, ok, f"worst relative error {worst:.2e} over 5 seeds, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. search exactness


def test_criterion_2_search_exactness():
    spent, mismatches = 0.0, 0
    for p in range(20):
        rng = np.random.default_rng(200 + p)
        ids = [f"m{i:05d}" for i in rng.permutation(1000)]
        pool = [HyperplaneModel(i, rng.standard_normal(32), float(rng.standard_normal())) for i in ids]
        seeds = [pool[i] for i in rng.choice(1000, 10, replace=False)]
        t0 = time.perf_counter()
        got = nearest_models(seeds, pool, 50)
        spent += time.perf_counter() - t0
        want = nearest_oracle(
            [s.identity_id for s in seeds], [s.w for s in seeds], ids, [m.w for m in pool], 50
        )
        for g, (nids, sims) in zip(got, want):
            mismatches += g.neighbor_ids != nids or g.similarities != sims
    verdict(2, mismatches == 0 and spent < 60,
            f"{mismatches} mismatching neighborhoods in 200, search took {spent:.2f}s")


# ---------------------------------------------------------------- 3. metric oracles


def random_split(rng, quantize):
    n_gal, n_probe, n_imp = int(rng.integers(2, 51)), int(rng.integers(1, 201)), int(rng.integers(1, 201))
    d = 8
    gal = normalize_rows(rng.random((n_gal, d)))[0]
    ids = [f"g{i:03d}" for i in rng.permutation(n_gal)]
    mates = rng.integers(n_gal, size=n_probe)
    probes = normalize_rows(gal[mates] + 0.4 * rng.random((n_probe, d)))[0]
    imps = normalize_rows(rng.random((n_imp, d)))[0]
    if quantize:  # forces exact score ties
        gal, probes, imps = (np.round(a * 4) / 4 for a in (gal, probes, imps))
    return ProbeGallerySplit(ids, gal, [ids[m] for m in mates], probes, imps)


def test_criterion_3_metric_oracles():
    ranks, fars = (1, 2, 5, 10, 20), (0.01, 0.1, 1.0)
    bad = 0
    for k in range(50):
        s = random_split(np.random.default_rng(300 + k), quantize=k % 3 == 0)
        closed = closed_set_eval(s, ranks) == rank_curve_oracle(s.gallery_ids, s.gallery, s.probe_ids, s.probes, ranks)
        opened = open_set_eval(s, fars) == dir_oracle(
            s.gallery_ids, s.gallery, s.probe_ids, s.probes, s.impostors, fars
        )
        bad += not (closed and opened)
    verdict(3, bad == 0, f"{bad} of 50 instances differ from the oracles")


# ---------------------------------------------------------------- 4. Taylor entropy


def centered_draw(rng, n):
    z = rng.uniform(-1, 1, n)
    z -= z.mean()
    return z / np.abs(z).max()


def taylor_error(z):
    return abs(taylor_entropy(z) - entropy(nn_core.softmax(z)))


def test_criterion_4_taylor_entropy():
    rng = np.random.default_rng(4)
    worst, factors = 0.0, []
    for n in (10, 100):
        dirs = [centered_draw(rng, n) for _ in range(1000)]
        worst = max(worst, max(taylor_error(0.01 * z) for z in dirs))
        errs = [np.mean([taylor_error(s * z) for z in dirs]) for s in (0.1, 0.05, 0.025)]
        factors += [errs[1] / errs[0], errs[2] / errs[1]]
    ok = worst <= 1e-3 and max(factors) <= 0.6
    verdict(4, ok, f"max error {worst:.2e}, halving factors {', '.join(f'{f:.3f}' for f in factors)}")


# ---------------------------------------------------------------- 5-9. trend experiments


def test_criterion_5_bottleneck_trend():
    t0 = time.perf_counter()
    runs = [E.bottleneck_trend(seed) for seed in range(5)]
    elapsed = time.perf_counter() - t0
    wins = sum(r["passed"] for r in runs)
    detail = "; ".join(f"{r['rank1'][r['widest']]:.1f} vs {r['best_narrower']:.1f}" for r in runs)
    verdict(5, wins >= 4 and elapsed < 900,
            f"{wins}/5 seeds, widest vs best narrower Rank-1: {detail}; {elapsed / 60:.1f} min")


def test_criterion_6_binarization():
    drops = [E.binarization_drop(seed)["drop"] for seed in range(5)]
    mean = float(np.mean(drops))
    verdict(6, mean <= 2.0, f"mean drop {mean:.2f} points, per seed {', '.join(f'{d:.2f}' for d in drops)}")


def test_criterion_7_norm_entropy():
    s = E.norm_entropy_link(0)
    ok = (
        s["num_held_out"] >= 500
        and s["pearson_norm_entropy"] < -0.3
        and s["mean_norm_rank1"] > s["mean_norm_rank_gt1"]
    )
    verdict(7, ok, f"{s['num_held_out']} images, pearson {s['pearson_norm_entropy']:.3f}, "
                   f"mean norm rank-1 {s['mean_norm_rank1']:.3f} vs misretrieved {s['mean_norm_rank_gt1']:.3f}")


def test_criterion_8_bootstrap_hardness():
    runs = [E.bootstrap_hardness(seed) for seed in range(5)]
    wins = sum(r["passed"] for r in runs)
    detail = "; ".join(f"{r['bootstrap_rank1']:.1f} vs {r['control_rank1']:.1f}" for r in runs)
    verdict(8, wins >= 4, f"{wins}/5 seeds, bootstrapped vs control Rank-1: {detail}")


def test_criterion_9_expansion():
    runs = [E.expansion_benefit(seed) for seed in range(3)]
    big = float(np.mean([r["expanded"] for r in runs]))
    small = float(np.mean([r["unexpanded"] for r in runs]))
    verdict(9, big >= small, f"mean target Rank-1 expanded {big:.2f} vs un-expanded {small:.2f}")


# ---------------------------------------------------------------- 10-11. demo pipeline


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    t0 = time.perf_counter()
    status = run_pipeline(demo_config(), out)
    return out, status, time.perf_counter() - t0


def test_criterion_10_determinism_and_formats(demo_run, tmp_path):
    out, _, _ = demo_run
    first = tree(out)
    again = run_pipeline(demo_config(), out)
    fresh = tmp_path / "fresh"
    run_pipeline(demo_config(), fresh)
    identical = tree(out) == first and tree(fresh) == first
    ckpts = sorted(out.rglob("*.ckpt"))
    embs = sorted(out.rglob("*.emb"))
    trips = all(nn_core.checkpoint_bytes(nn_core.load_checkpoint(p)) == p.read_bytes() for p in ckpts)
    trips &= all(embeddings_to_bytes(embeddings_from_bytes(p.read_bytes())) == p.read_bytes() for p in embs)
    net = nn_core.load_checkpoint(ckpts[0])
    back = nn_core.checkpoint_from_bytes(nn_core.checkpoint_bytes(net))
    trips &= all(
        a[k].tobytes() == b[k].tobytes() for a, b in zip(net.params, back.params) for k in a
    )
    ok = identical and trips and set(again.values()) == {"skipped"} and bool(ckpts) and bool(embs)
    verdict(10, ok, f"{len(first)} files byte-identical on rerun and fresh run: {identical}; "
                    f"{len(ckpts)} checkpoints and {len(embs)} embedding files round-trip: {trips}")


def test_criterion_11_budget(demo_run):
    _, status, elapsed = demo_run
    ok = set(status.values()) == {"ran"} and elapsed < 1800
    verdict(11, ok, f"{len(status)} stages in {elapsed:.1f}s, limit 1800s")
