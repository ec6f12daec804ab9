"""F7 feature extraction and the operations that reshape a trained network.

- ``extract``: unit-normalized F7 embeddings with their raw (pre-normalization) norm
- ``binarize``: threshold F7 at zero
- ``compress_retrain``: warm-start a narrower bottleneck from a trained network
- ``expand_network``: widen L4-L6 and F7, freezing the convolutional front end
- ``fuse``: concatenate embeddings from several networks
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .io_utils import atomic_write_bytes
from .nn_core import CONV, FC, LOCAL, Network, NetworkConfig, TrainConfig

EMBEDDING_MAGIC = b"WFEMB\x00\x00\x01"
BINARY_MAGIC = b"WFBIN\x00\x00\x01"
EMBEDDING_VERSION = 1


@dataclass
class Embedding:
    vector: np.ndarray
    raw_norm: float
    source_image_id: str
    degenerate: bool = False


@dataclass
class BinaryEmbedding:
    bits: np.ndarray  # bool
    source_image_id: str


@dataclass
class EmbeddingSet:
    """A batch of embeddings stored as one matrix; indexing yields ``Embedding``."""

    vectors: np.ndarray  # (n, d) float32, unit rows unless degenerate
    raw_norms: np.ndarray  # (n,) float32
    image_ids: list[str]
    model_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.raw_norms = np.asarray(self.raw_norms, dtype=np.float32)
        if len(self.vectors) != len(self.image_ids) or len(self.raw_norms) != len(self.image_ids):
            raise ValueError("vectors, raw_norms and image_ids must have equal length")

    def __len__(self):
        return len(self.image_ids)

    def __getitem__(self, i: int) -> Embedding:
        return Embedding(
            self.vectors[i], float(self.raw_norms[i]), self.image_ids[i], bool(self.degenerate[i])
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def degenerate(self) -> np.ndarray:
        return self.raw_norms == 0

    def take(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx, dtype=int)
        return EmbeddingSet(
            self.vectors[idx], self.raw_norms[idx], [self.image_ids[i] for i in idx], self.model_id
        )

    def select(self, image_ids) -> "EmbeddingSet":
        pos = {iid: i for i, iid in enumerate(self.image_ids)}
        return self.take([pos[i] for i in image_ids])


def normalize_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.sqrt((raw * raw).sum(axis=1))
    vec = np.zeros_like(raw)
    nz = norms > 0
    vec[nz] = raw[nz] / norms[nz, None]
    return vec.astype(np.float32), norms.astype(np.float32)


def raw_features(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Raw F7 activations (post-ReLU, pre-normalization)."""
    f7 = len(net.config.layers) - 2
    chunks = [
        nn_core.forward(net, images[s : s + batch_size], upto=f7).outputs[f7]
        for s in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks).astype(np.float64)


def extract(
    net: Network, images: np.ndarray, image_ids=None, model_id: str = "", batch_size: int = 256
) -> EmbeddingSet:
    """Normalized F7 embeddings. Zero-norm rows are kept as zero vectors (degenerate)."""
    images = np.asarray(images)
    if image_ids is None:
        image_ids = [str(i) for i in range(len(images))]
    vec, norms = normalize_rows(raw_features(net, images, batch_size))
    return EmbeddingSet(vec, norms, list(image_ids), model_id)


def binarize(e: Embedding) -> BinaryEmbedding:
    # normalization is a positive rescaling, so signs of the vector equal signs of raw F7
    return BinaryEmbedding(np.asarray(e.vector) > 0, e.source_image_id)


def binarize_set(es: EmbeddingSet) -> np.ndarray:
    return es.vectors > 0


def hamming_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fraction of agreeing bits, row-wise for matching (n, d) bit arrays."""
    return (np.asarray(a) == np.asarray(b)).mean(axis=-1)


def _replace_layer(config: NetworkConfig, name: str, **changes) -> NetworkConfig:
    cfg = NetworkConfig.from_dict(config.to_dict())
    layer = cfg.layers[cfg.layer_index(name)]
    for k, v in changes.items():
        setattr(layer, k, v)
    return cfg


def _head_names(config: NetworkConfig) -> tuple[str, str]:
    return config.layers[-2].name, config.layers[-1].name


def compress_retrain(
    base: Network,
    new_bottleneck: int,
    images: np.ndarray,
    labels: np.ndarray,
    tc: TrainConfig,
    num_classes: int | None = None,
) -> tuple[Network, list[float]]:
    """Shrink F7 to ``new_bottleneck``, keeping every layer below F7 from ``base``.

    F7 and F8 are freshly initialized; the whole network is then trained.
    """
    if new_bottleneck >= base.config.bottleneck_dim:
        raise ValueError(
            f"new bottleneck {new_bottleneck} must be smaller than {base.config.bottleneck_dim}"
        )
    if new_bottleneck < 1:
        raise ValueError("bottleneck must be positive")
    num_classes = num_classes or base.config.num_classes
    f7, f8 = _head_names(base.config)
    cfg = _replace_layer(base.config, f7, channels_out=new_bottleneck)
    cfg = _replace_layer(cfg, f8, channels_out=num_classes)
    cfg.bottleneck_dim, cfg.num_classes = new_bottleneck, num_classes
    net = nn_core.build_network(cfg, tc.rng_seed, base.dtype)
    n = len(cfg.layers)
    for i in range(n - 2):
        net.params[i] = {k: v.copy() for k, v in base.params[i].items()}
    net.frozen = {i for i in base.frozen if i < n - 2}
    return nn_core.train(net, images, labels, tc)


def expand_network(
    base: Network,
    filter_multiplier: int,
    new_bottleneck: int,
    num_classes: int | None = None,
    rng_seed: int | None = None,
) -> Network:
    """Widen the locally-connected layers and F7; copy and freeze the conv front end.

    Every convolutional layer before the first locally-connected layer (C1, C3 in
    the default stack) keeps its trained weights and joins the frozen set. All
    later layers are re-initialized.
    """
    if filter_multiplier < 1:
        raise ValueError("filter_multiplier must be >= 1")
    num_classes = num_classes or base.config.num_classes
    cfg = NetworkConfig.from_dict(base.config.to_dict())
    first_local = next(i for i, l in enumerate(cfg.layers) if l.kind == LOCAL)
    for l in cfg.layers:
        if l.kind == LOCAL:
            l.channels_out *= filter_multiplier
    cfg.layers[-2].channels_out = new_bottleneck
    cfg.layers[-1].channels_out = num_classes
    cfg.bottleneck_dim, cfg.num_classes = new_bottleneck, num_classes
    seed = base.rng_seed + 1 if rng_seed is None else rng_seed
    net = nn_core.build_network(cfg, seed, base.dtype)
    for i in range(first_local):
        net.params[i] = {k: v.copy() for k, v in base.params[i].items()}
        if cfg.layers[i].kind == CONV:
            net.frozen.add(i)
    return net


def fuse(sets: list[EmbeddingSet], model_id: str = "fusion") -> EmbeddingSet:
    """Concatenate per-model embeddings of the same images, then re-normalize."""
    if not sets:
        raise ValueError("nothing to fuse")
    ids = sets[0].image_ids
    for s in sets[1:]:
        if s.image_ids != ids:
            raise ValueError("image ids differ between embedding sets")
    cat = np.concatenate([s.vectors.astype(np.float64) for s in sets], axis=1)
    vec, norms = normalize_rows(cat)
    return EmbeddingSet(vec, norms, list(ids), model_id, {"parts": [s.model_id for s in sets]})


# ---------------------------------------------------------------- file formats


def _frame(magic: bytes, header: dict, body: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<Q", len(head)) + head + body


def _unframe(data: bytes, magic: bytes):
    if data[: len(magic)] != magic:
        raise ValueError("bad file magic")
    (n,) = struct.unpack_from("<Q", data, len(magic))
    start = len(magic) + 8
    return json.loads(data[start : start + n]), data[start + n :]


def embeddings_to_bytes(es: EmbeddingSet) -> bytes:
    n, d = es.vectors.shape
    ids = "\n".join(es.image_ids).encode()
    header = {
        "format": "webface-embeddings",
        "format_version": EMBEDDING_VERSION,
        "dim": d,
        "count": n,
        "model_id": es.model_id,
        "ids_bytes": len(ids),
    }
    body = (
        np.ascontiguousarray(es.vectors, dtype="<f4").tobytes()
        + np.ascontiguousarray(es.raw_norms, dtype="<f4").tobytes()
        + ids
    )
    return _frame(EMBEDDING_MAGIC, header, body)


def embeddings_from_bytes(data: bytes) -> EmbeddingSet:
    header, body = _unframe(data, EMBEDDING_MAGIC)
    if header.get("format_version") != EMBEDDING_VERSION:
        raise ValueError("unsupported embedding file version")
    n, d = header["count"], header["dim"]
    vec = np.frombuffer(body, dtype="<f4", count=n * d).reshape(n, d)
    norms = np.frombuffer(body, dtype="<f4", count=n, offset=4 * n * d)
    raw_ids = body[4 * n * (d + 1) :]
    if len(raw_ids) != header["ids_bytes"]:
        raise ValueError("embedding file truncated")
    ids = raw_ids.decode().split("\n") if n else []
    return EmbeddingSet(vec.astype(np.float32), norms.astype(np.float32), ids, header["model_id"])


def binary_to_bytes(bits: np.ndarray, image_ids: list[str], model_id: str = "") -> bytes:
    bits = np.asarray(bits, dtype=bool)
    n, d = bits.shape
    ids = "\n".join(image_ids).encode()
    packed = np.packbits(bits, axis=1, bitorder="little")
    header = {
        "format": "webface-binary-embeddings",
        "format_version": EMBEDDING_VERSION,
        "dim": d,
        "count": n,
        "model_id": model_id,
        "row_bytes": packed.shape[1],
        "ids_bytes": len(ids),
    }
    return _frame(BINARY_MAGIC, header, packed.tobytes() + ids)


def binary_from_bytes(data: bytes) -> tuple[np.ndarray, list[str]]:
    header, body = _unframe(data, BINARY_MAGIC)
    n, d, rb = header["count"], header["dim"], header["row_bytes"]
    packed = np.frombuffer(body, dtype=np.uint8, count=n * rb).reshape(n, rb)
    bits = np.unpackbits(packed, axis=1, count=d, bitorder="little").astype(bool)
    ids = body[n * rb :].decode().split("\n") if n else []
    return bits, ids


def save_embeddings(es: EmbeddingSet, path) -> None:
    atomic_write_bytes(path, embeddings_to_bytes(es))


def load_embeddings(path) -> EmbeddingSet:
    with open(path, "rb") as f:
        return embeddings_from_bytes(f.read())
