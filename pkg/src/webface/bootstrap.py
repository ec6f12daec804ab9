"""Semantic bootstrapping: select hard training identities in hyperplane space.

Each identity is summarized by a one-vs-all linear classifier trained over its
embeddings. Identities are then compared by the cosine between classifier weight
vectors; seeds are drawn at random and their nearest classifiers (exact top-k
via blocked matrix multiply) form the bootstrapped identity set.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluation import closed_set_eval, closed_split
from .hinge import fit_hinge
from .io_utils import atomic_write_bytes, write_json
from .linalg import ordered_dot_matrix, ordered_norms, unit_rows
from .representation import EmbeddingSet

log = logging.getLogger(__name__)

BANK_MAGIC = b"WFBANK\x00\x01"
BANK_VERSION = 1


@dataclass
class HyperplaneModel:
    identity_id: str
    w: np.ndarray
    b: float
    num_pos: int = 0
    num_neg: int = 0
    initial_objective: float = float("nan")
    final_objective: float = float("nan")

    def vector(self, include_bias: bool = False) -> np.ndarray:
        w = np.asarray(self.w, dtype=np.float64)
        return np.append(w, self.b) if include_bias else w


@dataclass
class BootstrapPlan:
    num_seeds: int = 10
    neighbors_per_seed: int = 50
    rng_seed: int = 0
    include_bias: bool = False

    def validate(self, num_models: int):
        if self.num_seeds < 1 or self.neighbors_per_seed < 1:
            raise ValueError("num_seeds and neighbors_per_seed must be positive")
        if self.num_seeds > num_models:
            raise ValueError(f"num_seeds {self.num_seeds} exceeds {num_models} models")
        if self.neighbors_per_seed > num_models - 1:
            raise ValueError(
                f"neighbors_per_seed {self.neighbors_per_seed} exceeds {num_models - 1} candidates"
            )


@dataclass
class Neighborhood:
    seed_id: str
    neighbor_ids: list[str]
    similarities: list[float]


@dataclass
class BootstrappedDataset:
    seed_ids: list[str]
    neighborhoods: dict[str, Neighborhood]
    selected_identities: list[str]
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "plan": self.provenance.get("plan"),
            "model_hash": self.provenance.get("model_hash"),
            "seed_ids": self.seed_ids,
            "neighborhoods": {
                s: {"neighbors": n.neighbor_ids, "similarities": n.similarities}
                for s, n in self.neighborhoods.items()
            },
            "selected_identities": self.selected_identities,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BootstrappedDataset":
        hoods = {
            s: Neighborhood(s, v["neighbors"], v["similarities"]) for s, v in d["neighborhoods"].items()
        }
        return cls(
            d["seed_ids"],
            hoods,
            d["selected_identities"],
            {"plan": d["plan"], "model_hash": d["model_hash"]},
        )


def default_negatives(num_pos: int) -> int:
    return min(10 * num_pos, 500)


def train_hyperplanes(
    groups: dict[str, np.ndarray],
    negatives_per_identity: int | None = None,
    rng_seed: int = 0,
    epochs: int = 200,
) -> list[HyperplaneModel]:
    """One-vs-all hinge classifier per identity.

    ``groups`` maps identity id -> (n_i, d) embedding matrix. Negatives for
    identity ``i`` are a seeded random subset of all other identities'
    embeddings; the draw depends only on ``(rng_seed, i)``.
    """
    names = list(groups)
    empty = [n for n in names if len(groups[n]) == 0]
    for n in empty:
        log.warning("identity %s has no embeddings; skipped", n)
    names = [n for n in names if len(groups[n]) > 0]
    if len(names) < 2:
        raise ValueError("need at least two identities with embeddings")
    mats = [np.asarray(groups[n], dtype=np.float64) for n in names]
    allx = np.concatenate(mats)
    owner = np.concatenate([np.full(len(m), k) for k, m in enumerate(mats)])
    models = []
    for k, name in enumerate(names):
        pos = mats[k]
        others = np.flatnonzero(owner != k)
        want = negatives_per_identity or default_negatives(len(pos))
        rng = np.random.default_rng([rng_seed, k])
        pick = np.sort(rng.choice(others, size=min(want, len(others)), replace=False))
        neg = allx[pick]
        X = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        w, b, start, final = fit_hinge(X, y, lam=1.0 / len(y), epochs=epochs)
        # stored at bank precision so a saved bank reloads to identical models
        w32, b32 = w.astype(np.float32), float(np.float32(b))
        models.append(HyperplaneModel(name, w32, b32, len(pos), len(neg), start, final))
    return models


def model_similarity(h1: HyperplaneModel, h2: HyperplaneModel, include_bias: bool = False) -> float:
    """Cosine of the angle between two hyperplanes (scalar reference path)."""
    a = h1.vector(include_bias)
    c = h2.vector(include_bias)
    if a.shape != c.shape:
        raise ValueError("models have different dimensions")
    na = ordered_norms(a[None])[0]
    nc = ordered_norms(c[None])[0]
    if na == 0 or nc == 0:
        raise ValueError("zero-norm hyperplane has no direction")
    a = a / na
    c = c / nc
    s = 0.0
    for x, z in zip(a.tolist(), c.tolist()):
        s += x * z
    return s


def _unit_matrix(models: list[HyperplaneModel], include_bias: bool) -> np.ndarray:
    W = np.stack([m.vector(include_bias) for m in models])
    if np.any(ordered_norms(W) == 0):
        bad = next(m.identity_id for m, n in zip(models, ordered_norms(W)) if n == 0)
        raise ValueError(f"hyperplane {bad} has zero norm")
    return unit_rows(W)


def nearest_models(
    seeds: list[HyperplaneModel],
    pool: list[HyperplaneModel],
    k: int,
    include_bias: bool = False,
    block_rows: int = 4096,
) -> list[Neighborhood]:
    """Exact top-k pool models per seed by cosine similarity.

    The seed's own identity is excluded from its list. Ordering is descending
    similarity, ties by ascending identity id.
    """
    pool_ids = [m.identity_id for m in pool]
    if k < 1:
        raise ValueError("k must be positive")
    # every seed's own model may be in the pool, so the bound is len(pool) - 1
    if k > len(pool) - 1:
        raise ValueError(f"k={k} exceeds the {len(pool) - 1} candidates per seed")
    P = _unit_matrix(pool, include_bias)
    S = _unit_matrix(seeds, include_bias)
    sims = ordered_dot_matrix(P, S, block_rows=block_rows).T  # (seeds, pool)
    id_rank = np.empty(len(pool), dtype=np.int64)
    id_rank[sorted(range(len(pool)), key=lambda i: pool_ids[i])] = np.arange(len(pool))
    out = []
    for s, seed in enumerate(seeds):
        row = sims[s]
        cand = np.asarray([i for i in range(len(pool)) if pool_ids[i] != seed.identity_id])
        # primary key: similarity descending; secondary: identity id ascending
        order = np.lexsort((id_rank[cand], -row[cand]))[:k]
        chosen = cand[order]
        out.append(
            Neighborhood(seed.identity_id, [pool_ids[i] for i in chosen], row[chosen].tolist())
        )
    return out


def model_hash(models: list[HyperplaneModel]) -> str:
    h = hashlib.sha256()
    for m in models:
        h.update(m.identity_id.encode() + b"\0")
        h.update(np.asarray(m.w, dtype="<f8").tobytes())
        h.update(struct.pack("<d", m.b))
    return h.hexdigest()


def build_bootstrap(models: list[HyperplaneModel], plan: BootstrapPlan) -> BootstrappedDataset:
    """Seeds sampled without replacement, plus each seed's nearest neighbors, deduplicated."""
    plan.validate(len(models))
    rng = np.random.default_rng(plan.rng_seed)
    seed_idx = rng.choice(len(models), size=plan.num_seeds, replace=False)
    seeds = [models[i] for i in seed_idx]
    hoods = nearest_models(seeds, models, plan.neighbors_per_seed, plan.include_bias)
    selected, seen = [], set()
    for seed, hood in zip(seeds, hoods):
        for ident in [seed.identity_id, *hood.neighbor_ids]:
            if ident not in seen:
                seen.add(ident)
                selected.append(ident)
    return BootstrappedDataset(
        [s.identity_id for s in seeds],
        {h.seed_id: h for h in hoods},
        selected,
        {"plan": asdict(plan), "model_hash": model_hash(models)},
    )


def hardness_report(
    dataset: BootstrappedDataset,
    embeddings: EmbeddingSet,
    identity_of: dict[str, str],
    control: list[str] | None = None,
    rng_seed: int = 0,
) -> dict:
    """Closed-set Rank-1 of baseline embeddings inside the bootstrapped identity set
    versus an equal-size control set.

    The control is drawn at random from identities outside the bootstrapped set
    when enough exist; otherwise it is topped up from inside it.
    """
    chosen = list(dataset.selected_identities)
    if control is None:
        all_ids = sorted({identity_of[i] for i in embeddings.image_ids})
        outside = [i for i in all_ids if i not in set(chosen)]
        rng = np.random.default_rng(rng_seed)
        if len(outside) >= len(chosen):
            control = [outside[i] for i in sorted(rng.choice(len(outside), len(chosen), replace=False))]
        else:
            inside = [i for i in all_ids if i in set(chosen)]
            extra = rng.choice(len(inside), len(chosen) - len(outside), replace=False)
            control = outside + [inside[i] for i in sorted(extra)]

    def rank1(idents):
        keep = set(idents)
        rows = [i for i, iid in enumerate(embeddings.image_ids) if identity_of[iid] in keep]
        return closed_set_eval(closed_split(embeddings.take(rows), identity_of), (1,))[1]

    return {
        "bootstrap_rank1": rank1(chosen),
        "control_rank1": rank1(control),
        "num_identities": len(chosen),
        "control_identities": list(control),
        "overlap": sorted(set(chosen) & set(control)),
    }


# ---------------------------------------------------------------- model bank file


def bank_to_bytes(models: list[HyperplaneModel]) -> bytes:
    dim = len(models[0].w) if models else 0
    ids = "\n".join(m.identity_id for m in models).encode()
    header = {
        "format": "webface-model-bank",
        "format_version": BANK_VERSION,
        "dim": dim,
        "count": len(models),
        "ids_bytes": len(ids),
        "stats": [[m.num_pos, m.num_neg, m.initial_objective, m.final_objective] for m in models],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    W = np.stack([m.w for m in models]).astype("<f4") if models else np.zeros((0, 0), "<f4")
    b = np.asarray([m.b for m in models], dtype="<f4")
    return BANK_MAGIC + struct.pack("<Q", len(head)) + head + W.tobytes() + b.tobytes() + ids


def bank_from_bytes(data: bytes) -> list[HyperplaneModel]:
    if data[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise ValueError("bad file magic")
    (n,) = struct.unpack_from("<Q", data, len(BANK_MAGIC))
    start = len(BANK_MAGIC) + 8
    header = json.loads(data[start : start + n])
    body = data[start + n :]
    count, dim = header["count"], header["dim"]
    W = np.frombuffer(body, "<f4", count * dim).reshape(count, dim)
    b = np.frombuffer(body, "<f4", count, offset=4 * count * dim)
    ids = body[4 * count * (dim + 1) :].decode().split("\n") if count else []
    return [
        HyperplaneModel(i, W[k].astype(np.float32), float(b[k]), int(s[0]), int(s[1]), s[2], s[3])
        for k, (i, s) in enumerate(zip(ids, header["stats"]))
    ]


def save_bank(models, path) -> None:
    atomic_write_bytes(path, bank_to_bytes(models))


def load_bank(path) -> list[HyperplaneModel]:
    with open(path, "rb") as f:
        return bank_from_bytes(f.read())


def save_manifest(ds: BootstrappedDataset, path) -> None:
    write_json(path, ds.to_json())
