"""Resumable end-to-end run: data, baseline, compression, bootstrapping, expansion,
evaluation and diagnostics, all under one output directory.

Every stage declares the config sections and upstream artifacts it reads. Its
input digest hashes those; a stage whose input digest and outputs match the run
manifest is skipped. Artifacts carry no timestamps, so an unchanged config
reproduces the artifact tree byte for byte.

Layout of ``<out>``::

    config.json                 resolved configuration
    run_manifest.json           config hash, per-stage input digests and output hashes
    data/                       PGM dataset with split manifest
    checkpoints/*.ckpt          baseline, compressed, expanded networks
    logs/*_loss.json            per-epoch training loss
    embeddings/*.emb, *.bin     target/pool embeddings, binarized target embeddings
    bootstrap/                  hyperplane bank, bootstrapped set, hardness report
    reports/                    protocol tables and per-model evaluation reports
    diagnostics/                norm/entropy study, scaling curve, L6 activation map
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn_core
from .bootstrap import (
    BootstrapPlan,
    BootstrappedDataset,
    build_bootstrap,
    hardness_report,
    load_bank,
    save_bank,
    save_manifest,
    train_hyperplanes,
)
from .data import (
    FaceDataset,
    SynthConfig,
    default_splits,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .diagnostics import l6_activation_map, norm_entropy_study, scaling_curve, write_activation_pgm
from .evaluation import (
    EvalReport,
    closed_rows,
    closed_set_eval,
    closed_split,
    cosine_scores,
    make_pairs,
    mate_ranks,
    open_set_details,
    open_split,
    roc_curve,
    similarity_protocol,
    verification_protocol,
)
from .io_utils import atomic_write_bytes, atomic_write_text, dump_json, sha256_bytes, sha256_file, write_json
from .linalg import ordered_pair_dots
from .nn_core import ConfigError, TrainConfig
from .representation import (
    binarize_set,
    binary_to_bytes,
    compress_retrain,
    expand_network,
    extract,
    fuse,
    hamming_similarity,
    load_embeddings,
    save_embeddings,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


# ---------------------------------------------------------------- configuration


@dataclass
class DataSection:
    path: str | None = None  # existing PGM dataset; None generates synthetic faces
    synth: SynthConfig = field(
        default_factory=lambda: SynthConfig(
            num_identities=50, images_per_identity=20, image_size=32, pool_fraction=0.4, target_fraction=0.2
        )
    )


@dataclass
class NetSection:
    conv_filters: tuple = (8, 16)
    local_filters: int = 16


@dataclass
class BaselineSection:
    bottleneck: int = 256
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, epochs=10))


@dataclass
class CompressSection:
    bottleneck: int = 64
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, epochs=10))


@dataclass
class HyperplaneSection:
    negatives_per_identity: int | None = None  # None: 10x positives, capped at 500
    epochs: int = 200
    rng_seed: int = 0


@dataclass
class ExpandSection:
    filter_multiplier: int = 2
    bottleneck: int = 256
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, epochs=10))


@dataclass
class EvaluateSection:
    ranks: tuple = (1, 10)
    far_levels: tuple = (0.01, 0.1, 1.0)
    num_pairs: int = 1000
    folds: int = 2
    C: float = 1.0
    gallery_fraction: float = 0.5
    roc_points: int | None = 100
    rng_seed: int = 0


@dataclass
class DiagnoseSection:
    scales: tuple = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    compress: CompressSection = field(default_factory=CompressSection)
    hyperplanes: HyperplaneSection = field(default_factory=HyperplaneSection)
    bootstrap: BootstrapPlan = field(default_factory=lambda: BootstrapPlan(num_seeds=3, neighbors_per_seed=5))
    expand: ExpandSection = field(default_factory=ExpandSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    def validate(self):
        if self.data.path is not None and not Path(self.data.path).is_dir():
            raise ConfigError(f"data.path: dataset directory {self.data.path} does not exist")
        if self.compress.bottleneck >= self.baseline.bottleneck:
            raise ConfigError("compress.bottleneck must be smaller than baseline.bottleneck")
        if self.expand.filter_multiplier < 1:
            raise ConfigError("expand.filter_multiplier must be >= 1")
        if any(not 0 < f <= 1 for f in self.evaluate.far_levels):
            raise ConfigError("evaluate.far_levels must lie in (0, 1]")
        if self.evaluate.folds < 2:
            raise ConfigError("evaluate.folds must be >= 2")

    def digest(self) -> str:
        return sha256_bytes(canonical(self.to_dict()))


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key {path + unknown[0]!r}")
    defaults = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        value, default = d[f.name], getattr(defaults, f.name)
        if dataclasses.is_dataclass(default):
            base = asdict(default)
            base.update(value if isinstance(value, dict) else {})
            if not isinstance(value, dict):
                raise ConfigError(f"{path + f.name}: expected an object")
            value = _build(type(default), base, f"{path}{f.name}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif hints.get(f.name) in (int, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path + f.name}: expected a number, got {value!r}")
            if hints[f.name] is float:
                value = float(value)
            elif value != int(value):
                raise ConfigError(f"{path + f.name}: expected an integer, got {value!r}")
            else:
                value = int(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return PipelineConfig.from_dict(raw)


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------- stage machinery


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


MODELS = ("baseline", "compressed", "expanded", "fusion")


class RunContext:
    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._ds: FaceDataset | None = None

    def path(self, rel: str) -> Path:
        return self.out / rel

    @property
    def dataset(self) -> FaceDataset:
        if self._ds is None:
            self._ds = load_dataset(self.path("data"))
        return self._ds

    def identity_of(self) -> dict[str, str]:
        ds = self.dataset
        return dict(zip(ds.image_ids, ds.identity_of))

    def checkpoint(self, name: str):
        return nn_core.load_checkpoint(self.path(f"checkpoints/{name}.ckpt"))

    def target_embeddings(self, model: str):
        if model == "fusion":
            return fuse([self.target_embeddings("compressed"), self.target_embeddings("expanded")])
        return load_embeddings(self.path(f"embeddings/target_{model}.emb"))


@dataclass
class Stage:
    name: str
    run: Callable[[RunContext], list[str]]
    sections: tuple
    inputs: tuple


def tree_digest(path: Path) -> str:
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(p.relative_to(path).as_posix().encode() + b"\0" + sha256_file(p).encode())
    return h.hexdigest()


def _write_curve(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------- stages


def stage_synth(ctx: RunContext) -> list[str]:
    c = ctx.cfg.data
    if c.path is None:
        ds = generate_synthetic(c.synth)
    else:
        ds = load_dataset(c.path)
        if not ds.splits:
            s = c.synth
            ds.splits = default_splits(ds, s.pool_fraction, s.target_fraction, s.test_fraction)
    for split in ("source_train", "pool", "target"):
        if not ds.splits.get(split):
            raise ValueError(f"dataset has no {split!r} identities; adjust the split fractions")
    save_dataset(ds, ctx.path("data"))
    ctx._ds = None
    return ["data"]


def _epoch_log(name: str):
    return lambda epoch, loss: log.info("%s epoch %d: loss %.4f", name, epoch + 1, loss)


def _train_new(ctx: RunContext, name: str, bottleneck: int, tc: TrainConfig) -> list[str]:
    ds = ctx.dataset
    groups = ds.split("source_train")
    names = sorted(groups)
    x, y, _ = ds.gather(groups, names)
    n = ctx.cfg.net
    cfg = nn_core.default_config(bottleneck, len(names), ds.dims[0], tuple(n.conv_filters), n.local_filters)
    net, hist = nn_core.train(nn_core.build_network(cfg, tc.rng_seed), x, y, tc, log=_epoch_log(name))
    nn_core.save_checkpoint(net, ctx.path(f"checkpoints/{name}.ckpt"))
    write_json(ctx.path(f"logs/{name}_loss.json"), {"epoch_loss": hist, "identities": names})
    return [f"checkpoints/{name}.ckpt", f"logs/{name}_loss.json"]


def stage_train(ctx: RunContext) -> list[str]:
    b = ctx.cfg.baseline
    return _train_new(ctx, "baseline", b.bottleneck, b.train)


def stage_compress(ctx: RunContext) -> list[str]:
    ds = ctx.dataset
    groups = ds.split("source_train")
    x, y, _ = ds.gather(groups, sorted(groups))
    c = ctx.cfg.compress
    net, hist = compress_retrain(ctx.checkpoint("baseline"), c.bottleneck, x, y, c.train)
    nn_core.save_checkpoint(net, ctx.path("checkpoints/compressed.ckpt"))
    write_json(ctx.path("logs/compressed_loss.json"), {"epoch_loss": hist})
    return ["checkpoints/compressed.ckpt", "logs/compressed_loss.json"]


def _embed(ctx: RunContext, net, split: str, model: str, rel: str) -> str:
    x, _, ids = ctx.dataset.gather(ctx.dataset.split(split))
    save_embeddings(extract(net, x, ids, model_id=model), ctx.path(rel))
    return rel


def stage_embed(ctx: RunContext) -> list[str]:
    compressed = ctx.checkpoint("compressed")
    return [
        _embed(ctx, compressed, "pool", "compressed", "embeddings/pool_compressed.emb"),
        _embed(ctx, ctx.checkpoint("baseline"), "target", "baseline", "embeddings/target_baseline.emb"),
        _embed(ctx, compressed, "target", "compressed", "embeddings/target_compressed.emb"),
    ]


def _pool_groups(ctx: RunContext):
    es = load_embeddings(ctx.path("embeddings/pool_compressed.emb"))
    ident = ctx.identity_of()
    rows: dict[str, list[int]] = {}
    for r, iid in enumerate(es.image_ids):
        rows.setdefault(ident[iid], []).append(r)
    return es, {k: es.vectors[v] for k, v in sorted(rows.items())}


def stage_hyperplanes(ctx: RunContext) -> list[str]:
    h = ctx.cfg.hyperplanes
    _, groups = _pool_groups(ctx)
    models = train_hyperplanes(groups, h.negatives_per_identity, h.rng_seed, h.epochs)
    save_bank(models, ctx.path("bootstrap/bank.bin"))
    return ["bootstrap/bank.bin"]


def stage_bootstrap(ctx: RunContext) -> list[str]:
    models = load_bank(ctx.path("bootstrap/bank.bin"))
    db2 = build_bootstrap(models, ctx.cfg.bootstrap)
    save_manifest(db2, ctx.path("bootstrap/db2.json"))
    es, _ = _pool_groups(ctx)
    rep = hardness_report(db2, es, ctx.identity_of(), rng_seed=ctx.cfg.bootstrap.rng_seed)
    write_json(ctx.path("bootstrap/hardness.json"), rep)
    return ["bootstrap/db2.json", "bootstrap/hardness.json"]


def stage_expand(ctx: RunContext) -> list[str]:
    db2 = BootstrappedDataset.from_json(json.loads(ctx.path("bootstrap/db2.json").read_text()))
    ds = ctx.dataset
    groups = ds.subset(db2.selected_identities, "pool")
    names = sorted(groups)
    x, y, _ = ds.gather(groups, names)
    e = ctx.cfg.expand
    net = expand_network(ctx.checkpoint("baseline"), e.filter_multiplier, e.bottleneck, len(names),
                         rng_seed=e.train.rng_seed + 1)
    net, hist = nn_core.train(net, x, y, e.train, log=_epoch_log("expanded"))
    nn_core.save_checkpoint(net, ctx.path("checkpoints/expanded.ckpt"))
    write_json(ctx.path("logs/expanded_loss.json"), {"epoch_loss": hist, "identities": names})
    return [
        "checkpoints/expanded.ckpt",
        "logs/expanded_loss.json",
        _embed(ctx, net, "target", "expanded", "embeddings/target_expanded.emb"),
    ]


def stage_eval_verify(ctx: RunContext) -> list[str]:
    ev = ctx.cfg.evaluate
    results, rows = {}, []
    for model in MODELS:
        es = ctx.target_embeddings(model)
        ia, ib, same = make_pairs(es, ctx.identity_of(), ev.num_pairs, ev.rng_seed)
        r = verification_protocol(es.vectors, ia, ib, same, ev.folds, ev.C)
        roc = roc_curve(r["scores"][same], r["scores"][~same], ev.roc_points)
        cos = ordered_pair_dots(es.vectors[ia], es.vectors[ib])
        results[model] = {
            "accuracy": r["accuracy"],
            "fold_accuracy": r["fold_accuracy"],
            "cosine_threshold_accuracy": similarity_protocol(cos, same, ev.folds),
            "num_pairs": len(ia),
        }
        rows += [(model, far, tar) for far, tar in roc]
    write_json(ctx.path("reports/verification.json"), results)
    _write_curve(ctx.path("reports/verification_roc.csv"), ("model", "far", "tar"), rows)
    return ["reports/verification.json", "reports/verification_roc.csv"]


def stage_eval_closed(ctx: RunContext) -> list[str]:
    ev = ctx.cfg.evaluate
    results, rows = {}, []
    for model in MODELS:
        split = closed_split(ctx.target_embeddings(model), ctx.identity_of())
        curve = closed_set_eval(split, ev.ranks)
        results[model] = {"rank_curve": {str(k): v for k, v in curve.items()},
                          "gallery": len(split.gallery_ids), "probes": len(split.probe_ids)}
        rows += [(model, k, v) for k, v in curve.items()]
    write_json(ctx.path("reports/closed_set.json"), results)
    _write_curve(ctx.path("reports/closed_set_rank.csv"), ("model", "rank", "accuracy"), rows)
    return ["reports/closed_set.json", "reports/closed_set_rank.csv"]


def stage_eval_open(ctx: RunContext) -> list[str]:
    ev = ctx.cfg.evaluate
    results, rows = {}, []
    for model in MODELS:
        split = open_split(ctx.target_embeddings(model), ctx.identity_of(), ev.gallery_fraction)
        det = open_set_details(split, ev.far_levels)
        results[model] = {
            "dir": {repr(f): v for f, v in det["dir"].items()},
            "threshold": {repr(f): v for f, v in det["threshold"].items()},
            "achieved_far": {repr(f): v for f, v in det["achieved_far"].items()},
            "genuine": len(split.probe_ids),
            "impostors": len(split.impostors),
        }
        rows += [(model, f, det["threshold"][f], det["dir"][f], det["achieved_far"][f]) for f in ev.far_levels]
    write_json(ctx.path("reports/open_set.json"), results)
    _write_curve(ctx.path("reports/open_set_dir.csv"), ("model", "far", "threshold", "dir", "achieved_far"), rows)
    return ["reports/open_set.json", "reports/open_set_dir.csv"]


def stage_diagnose(ctx: RunContext) -> list[str]:
    ds = ctx.dataset
    net = ctx.checkpoint("baseline")
    x, _, ids = ds.gather(ds.split("source_test"))
    es = extract(net, x, ids)
    g_ids, g_rows, p_ids, p_rows = closed_rows(es, ctx.identity_of())
    ranks = mate_ranks(cosine_scores(es.vectors[p_rows], es.vectors[g_rows]), g_ids, p_ids)
    rank_of = dict(zip(p_rows, ranks.tolist()))
    # gallery images have no retrieval rank
    study = norm_entropy_study(net, x, ids, [rank_of.get(i) for i in range(len(ids))])
    study.write(ctx.path("diagnostics"))

    fp = nn_core.forward(net, x[:1])
    head = net.params[-1]
    curve = scaling_curve(fp.representation[0], head["W"], ctx.cfg.diagnose.scales, head["b"])
    _write_curve(
        ctx.path("diagnostics/scaling_curve.csv"),
        ("scale", "exact_entropy", "approx_entropy"),
        zip(curve.scales.tolist(), curve.exact_entropy.tolist(), curve.approx_entropy.tolist()),
    )
    write_activation_pgm(ctx.path("diagnostics/l6_activation.pgm"), l6_activation_map(net, x[0]))

    tgt = ctx.target_embeddings("compressed")
    bits = binarize_set(tgt)
    atomic_write_bytes(ctx.path("embeddings/target_compressed.bin"), binary_to_bytes(bits, tgt.image_ids, "compressed"))
    ev = ctx.cfg.evaluate
    ia, ib, same = make_pairs(tgt, ctx.identity_of(), ev.num_pairs, ev.rng_seed)
    cos = similarity_protocol(ordered_pair_dots(tgt.vectors[ia], tgt.vectors[ib]), same, ev.folds)
    ham = similarity_protocol(hamming_similarity(bits[ia], bits[ib]), same, ev.folds)
    write_json(
        ctx.path("diagnostics/binarization.json"),
        {"cosine_accuracy": cos, "hamming_accuracy": ham, "drop": cos - ham,
         "scaling_small_scale_slope": curve.small_scale_slope},
    )
    return [
        "diagnostics/norm_entropy.csv",
        "diagnostics/norm_entropy_summary.json",
        "diagnostics/scaling_curve.csv",
        "diagnostics/l6_activation.pgm",
        "diagnostics/binarization.json",
        "embeddings/target_compressed.bin",
    ]


def stage_report(ctx: RunContext) -> list[str]:
    """One EvalReport per model, joined from the protocol tables."""
    ver = json.loads(ctx.path("reports/verification.json").read_text())
    closed = json.loads(ctx.path("reports/closed_set.json").read_text())
    opened = json.loads(ctx.path("reports/open_set.json").read_text())
    roc_rows = list(csv.DictReader(io.StringIO(ctx.path("reports/verification_roc.csv").read_text())))
    outs = []
    for model in MODELS:
        rep = EvalReport(
            model,
            ver[model]["accuracy"],
            [(float(r["far"]), float(r["tar"])) for r in roc_rows if r["model"] == model],
            {int(k): v for k, v in closed[model]["rank_curve"].items()},
            {float(k): v for k, v in opened[model]["dir"].items()},
        )
        outs += [f"reports/{n}" for n in rep.write(ctx.path("reports"), f"model_{model}")]
    return outs


STAGES = [
    Stage("synth", stage_synth, ("data",), ()),
    Stage("train", stage_train, ("net", "baseline"), ("data",)),
    Stage("compress", stage_compress, ("compress",), ("data", "checkpoints/baseline.ckpt")),
    Stage("embed", stage_embed, (), ("data", "checkpoints/baseline.ckpt", "checkpoints/compressed.ckpt")),
    Stage("hyperplanes", stage_hyperplanes, ("hyperplanes",), ("data", "embeddings/pool_compressed.emb")),
    Stage("bootstrap", stage_bootstrap, ("bootstrap",),
          ("data", "bootstrap/bank.bin", "embeddings/pool_compressed.emb")),
    Stage("expand", stage_expand, ("expand",), ("data", "bootstrap/db2.json", "checkpoints/baseline.ckpt")),
]
_TARGETS = tuple(f"embeddings/target_{m}.emb" for m in ("baseline", "compressed", "expanded"))
STAGES += [
    Stage("eval-verify", stage_eval_verify, ("evaluate",), ("data",) + _TARGETS),
    Stage("eval-closed", stage_eval_closed, ("evaluate",), ("data",) + _TARGETS),
    Stage("eval-open", stage_eval_open, ("evaluate",), ("data",) + _TARGETS),
    Stage("diagnose", stage_diagnose, ("evaluate", "diagnose"),
          ("data", "checkpoints/baseline.ckpt", "embeddings/target_compressed.emb")),
    Stage("report", stage_report, (),
          ("reports/verification.json", "reports/verification_roc.csv", "reports/closed_set.json",
           "reports/open_set.json")),
]
STAGE_NAMES = [s.name for s in STAGES]
# artifact -> stage that writes it, for "run X first" messages
PRODUCERS = {
    "data": "synth",
    "checkpoints/baseline.ckpt": "train",
    "checkpoints/compressed.ckpt": "compress",
    "embeddings/pool_compressed.emb": "embed",
    "embeddings/target_baseline.emb": "embed",
    "embeddings/target_compressed.emb": "embed",
    "bootstrap/bank.bin": "hyperplanes",
    "bootstrap/db2.json": "bootstrap",
    "embeddings/target_expanded.emb": "expand",
    "reports/verification.json": "eval-verify",
    "reports/verification_roc.csv": "eval-verify",
    "reports/closed_set.json": "eval-closed",
    "reports/open_set.json": "eval-open",
}


# ---------------------------------------------------------------- runner


def _read_manifest(out: Path) -> dict:
    p = out / "run_manifest.json"
    if p.exists():
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            log.warning("run manifest unreadable; every stage will rerun")
    return {"format_version": MANIFEST_VERSION, "stages": {}}


def _input_digest(stage: Stage, ctx: RunContext) -> str:
    full = ctx.cfg.to_dict()
    inputs = {}
    for rel in stage.inputs:
        p = ctx.path(rel)
        if not p.exists():
            raise StageError(stage.name, f"missing input {rel}; run stage {PRODUCERS.get(rel, '?')!r} first")
        inputs[rel] = tree_digest(p)
    payload = {"stage": stage.name, "config": {s: full[s] for s in stage.sections}, "inputs": inputs}
    return sha256_bytes(canonical(payload))


def _up_to_date(entry: dict | None, digest: str, ctx: RunContext) -> bool:
    if not entry or entry.get("input_digest") != digest:
        return False
    for rel, h in entry.get("outputs", {}).items():
        p = ctx.path(rel)
        if not p.exists() or tree_digest(p) != h:
            return False
    return True


def run_pipeline(cfg: PipelineConfig, out, stages: list[str] | None = None, force: bool = False) -> dict:
    """Run ``stages`` (default: all, in order). Returns ``{stage: "ran" | "skipped"}``."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = STAGE_NAMES if stages is None else stages
    unknown = [s for s in wanted if s not in STAGE_NAMES]
    if unknown:
        raise ConfigError(f"unknown stage {unknown[0]!r}; choose from {STAGE_NAMES}")
    write_json(out / "config.json", cfg.to_dict())
    manifest = _read_manifest(out)
    manifest["config_hash"] = cfg.digest()
    manifest["format_version"] = MANIFEST_VERSION
    ctx = RunContext(cfg, out)
    status = {}
    for stage in STAGES:
        if stage.name not in wanted:
            continue
        digest = _input_digest(stage, ctx)
        if not force and _up_to_date(manifest["stages"].get(stage.name), digest, ctx):
            log.info("stage %s: up to date, skipped", stage.name)
            status[stage.name] = "skipped"
            continue
        log.info("stage %s: running", stage.name)
        try:
            outputs = stage.run(ctx)
        except StageError:
            raise
        except Exception as e:
            raise StageError(stage.name, f"{type(e).__name__}: {e}") from e
        manifest["stages"][stage.name] = {
            "input_digest": digest,
            "outputs": {rel: tree_digest(ctx.path(rel)) for rel in outputs},
        }
        write_json(out / "run_manifest.json", manifest)
        status[stage.name] = "ran"
    write_json(out / "run_manifest.json", manifest)
    return status


def demo_config() -> PipelineConfig:
    return PipelineConfig()


def config_schema() -> str:
    """The default configuration as JSON; every key may be overridden."""
    return dump_json(PipelineConfig().to_dict())
