"""Face datasets: the synthetic identity generator and PGM directory I/O.

On-disk layout::

    <root>/<identity_id>/<image_id>.pgm     binary PGM (P5, maxval 255)
    <root>/manifest.json                   optional: splits and occlusion flags
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io_utils import atomic_write_bytes, write_json


class DatasetError(ValueError):
    pass


@dataclass
class Nuisance:
    shift_px: int = 2
    brightness_range: float = 0.15
    noise_std: float = 0.03
    occlusion_prob: float = 0.0
    occlusion_frac: float = 0.25  # fraction of the image area covered by the patch

    def scaled(self, factor: float) -> "Nuisance":
        return Nuisance(
            shift_px=int(round(self.shift_px * factor)),
            brightness_range=self.brightness_range * factor,
            noise_std=self.noise_std * factor,
            occlusion_prob=min(1.0, self.occlusion_prob * factor),
            occlusion_frac=self.occlusion_frac,
        )


@dataclass
class SynthConfig:
    num_identities: int = 50
    images_per_identity: int = 20
    image_size: int = 32
    latent_dim: int = 16
    latent_jitter: float = 0.35  # per-image deviation from the identity latent
    num_clusters: int = 0  # 0: identity latents drawn independently
    cluster_spread: float = 0.35
    nuisance: Nuisance = field(default_factory=Nuisance)
    domain_shift: float = 0.0
    pool_fraction: float = 0.0
    target_fraction: float = 0.0
    test_fraction: float = 0.2  # held-out images per source identity
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.nuisance, dict):
            self.nuisance = Nuisance(**self.nuisance)
        self.validate()

    def validate(self):
        for name in ("num_identities", "images_per_identity", "image_size", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        nz = self.nuisance
        if not 0 <= nz.occlusion_prob <= 1:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if not 0 <= nz.occlusion_frac <= 0.5:
            raise ValueError("occlusion_frac must be in [0, 0.5]")
        if self.domain_shift < 0:
            raise ValueError("domain_shift must be >= 0")
        if self.pool_fraction < 0 or self.target_fraction < 0:
            raise ValueError("split fractions must be >= 0")
        if self.pool_fraction + self.target_fraction >= 1:
            raise ValueError("pool_fraction + target_fraction must leave source identities")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FaceDataset:
    """Grayscale images in [0, 1] with identity labels and named splits.

    ``splits`` maps a split name to ``{identity_id: [image_id, ...]}``.
    """

    images: np.ndarray  # (N, H, W) float32
    image_ids: list[str]
    identity_of: list[str]
    occluded: np.ndarray  # (N,) bool
    splits: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    occlusion_boxes: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {iid: i for i, iid in enumerate(self.image_ids)}
        if len(self._index) != len(self.image_ids):
            raise DatasetError("duplicate image ids")

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])

    def index_of(self, image_id: str) -> int:
        return self._index[image_id]

    def identities(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for iid, ident in zip(self.image_ids, self.identity_of):
            out.setdefault(ident, []).append(iid)
        return out

    def split(self, name: str) -> dict[str, list[str]]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def gather(self, groups: dict[str, list[str]], identity_order: list[str] | None = None):
        """Stack images of ``groups``; labels index into ``identity_order``."""
        order = identity_order if identity_order is not None else list(groups)
        pos = {ident: k for k, ident in enumerate(order)}
        idx, labels = [], []
        for ident in order:
            for iid in groups.get(ident, []):
                idx.append(self._index[iid])
                labels.append(pos[ident])
        if not idx:
            raise DatasetError("selection contains no images")
        idx = np.asarray(idx)
        return self.images[idx], np.asarray(labels), [self.image_ids[i] for i in idx]

    def subset(self, identities, split: str | None = None) -> dict[str, list[str]]:
        source = self.split(split) if split else self.identities()
        return {ident: list(source[ident]) for ident in identities}


# ---------------------------------------------------------------- synthetic generator


def _smooth_basis(rng: np.random.Generator, k: int, size: int) -> np.ndarray:
    basis = ndimage.gaussian_filter(rng.standard_normal((k, size, size)), sigma=(0, 2.5, 2.5))
    basis -= basis.mean(axis=(1, 2), keepdims=True)
    basis /= np.abs(basis).max(axis=(1, 2), keepdims=True)
    return basis


def _template(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    face = np.exp(-((xx / 0.75) ** 2 + (yy / 0.95) ** 2) * 1.5)
    return 0.15 + 0.45 * face


def _identity_latents(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n, d = cfg.num_identities, cfg.latent_dim
    if cfg.num_clusters <= 0:
        return rng.standard_normal((n, d))
    centers = rng.standard_normal((cfg.num_clusters, d))
    assign = np.arange(n) % cfg.num_clusters
    return centers[assign] + cfg.cluster_spread * rng.standard_normal((n, d))


def cluster_of(cfg: SynthConfig, identity_index: int) -> int:
    return identity_index % cfg.num_clusters if cfg.num_clusters > 0 else 0


def identity_name(i: int) -> str:
    return f"id{i:05d}"


def render(latent: np.ndarray, basis: np.ndarray, template: np.ndarray) -> np.ndarray:
    signal = np.tensordot(latent, basis, axes=1) / np.sqrt(len(latent))
    return np.clip(template + 0.35 * signal, 0.0, 1.0)


def _apply_nuisance(img, nz: Nuisance, rng: np.random.Generator):
    if nz.shift_px > 0:
        dy, dx = rng.integers(-nz.shift_px, nz.shift_px + 1, size=2)
        img = ndimage.shift(img, (dy, dx), order=0, mode="nearest")
    if nz.brightness_range > 0:
        img = img * (1 + rng.uniform(-nz.brightness_range, nz.brightness_range))
    if nz.noise_std > 0:
        img = img + nz.noise_std * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    box = None
    if nz.occlusion_prob > 0 and rng.random() < nz.occlusion_prob:
        img, box = occlude(img, nz.occlusion_frac, rng)
    return img, box


def occlude(img: np.ndarray, frac: float, rng: np.random.Generator):
    """Zero a random square covering ``frac`` of the image area; returns (image, box)."""
    size = img.shape[0]
    side = max(1, int(round(np.sqrt(frac) * size)))
    top, left = rng.integers(0, size - side + 1, size=2)
    img = img.copy()
    img[top : top + side, left : left + side] = 0.0
    return img, (int(top), int(left), side)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PGM round-trips are exact."""
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def identity_roles(n: int, pool_fraction: float, target_fraction: float) -> list[str]:
    """Role per identity index: source first, then pool, then target."""
    n_target = int(round(target_fraction * n))
    n_pool = int(round(pool_fraction * n))
    n_source = n - n_target - n_pool
    if n_source < 1:
        raise ValueError("no source identities left after pool/target allocation")
    return ["source"] * n_source + ["pool"] * n_pool + ["target"] * n_target


def assign_splits(groups: dict[str, list[str]], roles: list[str], n_test: int) -> dict:
    """Role splits plus the source train/test image partition (last ``n_test`` images held out)."""
    splits: dict[str, dict[str, list[str]]] = {}
    for ident, role in zip(groups, roles):
        ids = groups[ident]
        splits.setdefault(role, {})[ident] = list(ids)
        if role == "source":
            cut = len(ids) - n_test
            if cut < 1:
                raise ValueError(f"identity {ident} has too few images for a held-out split")
            splits.setdefault("source_train", {})[ident] = ids[:cut]
            if n_test:
                splits.setdefault("source_test", {})[ident] = ids[cut:]
    return splits


def default_splits(ds: FaceDataset, pool_fraction: float, target_fraction: float, test_fraction: float):
    """Splits for a dataset without a manifest, assigned over identities in sorted order."""
    groups = {k: sorted(v) for k, v in sorted(ds.identities().items())}
    roles = identity_roles(len(groups), pool_fraction, target_fraction)
    n_test = min(int(round(test_fraction * len(v))) for v in groups.values())
    return assign_splits(groups, roles, n_test)


def generate_synthetic(cfg: SynthConfig) -> FaceDataset:
    """Render ``num_identities`` synthetic faces through a fixed smooth basis.

    Identities are assigned to splits in index order: source first, then pool,
    then target. Target identities get their nuisance amplified by
    ``1 + domain_shift``.
    """
    cfg.validate()
    root = np.random.default_rng([cfg.rng_seed, 0])
    basis = _smooth_basis(root, cfg.latent_dim, cfg.image_size)
    template = _template(cfg.image_size)
    latents = _identity_latents(cfg, root)

    n = cfg.num_identities
    role = identity_roles(n, cfg.pool_fraction, cfg.target_fraction)
    shifted = cfg.nuisance.scaled(1 + cfg.domain_shift)

    images, image_ids, identity_of, occluded = [], [], [], []
    boxes = {}
    groups: dict[str, list[str]] = {}
    n_test = int(round(cfg.test_fraction * cfg.images_per_identity))
    for i in range(n):
        ident = identity_name(i)
        nz = shifted if role[i] == "target" else cfg.nuisance
        ids = []
        for j in range(cfg.images_per_identity):
            rng = np.random.default_rng([cfg.rng_seed, 1, i, j])
            latent = latents[i] + cfg.latent_jitter * rng.standard_normal(cfg.latent_dim)
            img, box = _apply_nuisance(render(latent, basis, template), nz, rng)
            iid = f"{ident}_{j:04d}"
            images.append(quantize(img))
            image_ids.append(iid)
            identity_of.append(ident)
            occluded.append(box is not None)
            if box is not None:
                boxes[iid] = box
            ids.append(iid)
        groups[ident] = ids
    splits = assign_splits(groups, role, n_test)
    return FaceDataset(
        np.stack(images), image_ids, identity_of, np.asarray(occluded), splits, boxes
    )


# ---------------------------------------------------------------- PGM I/O


def write_pgm(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


_PGM_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    m = _PGM_HEADER.match(data)
    if not m:
        raise DatasetError(f"{path}: malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = data[m.end() :]
    if len(body) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)


def save_dataset(ds: FaceDataset, root) -> None:
    root = Path(root)
    for img, iid, ident in zip(ds.images, ds.image_ids, ds.identity_of):
        write_pgm(root / ident / f"{iid}.pgm", img)
    write_json(
        root / "manifest.json",
        {
            "format_version": 1,
            "splits": ds.splits,
            "occluded": [iid for iid, o in zip(ds.image_ids, ds.occluded) if o],
            "occlusion_boxes": {k: list(v) for k, v in ds.occlusion_boxes.items()},
        },
    )


def load_dataset(root) -> FaceDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    images, image_ids, identity_of = [], [], []
    dims = None
    for ident_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(ident_dir.glob("*.pgm"))
        if not files:
            raise DatasetError(f"{ident_dir}: identity has no images")
        for f in files:
            img = read_pgm(f)
            if dims is None:
                dims = img.shape
            elif img.shape != dims:
                raise DatasetError(f"{f}: dims {img.shape} differ from {dims}")
            images.append(img)
            image_ids.append(f.stem)
            identity_of.append(ident_dir.name)
    if not images:
        raise DatasetError(f"{root}: no identities found")
    splits, occluded_ids, boxes = {}, set(), {}
    manifest = root / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        splits = m.get("splits", {})
        occluded_ids = set(m.get("occluded", []))
        boxes = {k: tuple(v) for k, v in m.get("occlusion_boxes", {}).items()}
    known = set(image_ids)
    for name, groups in splits.items():
        for ids in groups.values():
            missing = [i for i in ids if i not in known]
            if missing:
                raise DatasetError(f"manifest split {name!r} references missing image {missing[0]}")
    occluded = np.asarray([iid in occluded_ids for iid in image_ids])
    return FaceDataset(np.stack(images), image_ids, identity_of, occluded, splits, boxes)
