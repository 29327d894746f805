"""Synthetic paired-resolution bags and their on-disk format.

A bag of class ``c`` holds ``ceil(rho * N)`` relevant instances drawn around
``signal * e_c`` (``e_c`` the c-th standard basis vector, so class directions
are orthonormal) and background instances around the origin, all with
isotropic noise ``noise``. Each instance's low-resolution counterpart is
either a 3x16x16 patch whose channel ``i`` is painted with
``sigmoid(feature[i])`` plus pixel noise, or a short feature vector made of
the first ``d_lo`` coordinates plus noise.

Bag file layout (little-endian)::

    magic "AHDB" | u16 version=1 | u16 label | u16 C | u8 mode | u8 reserved
    | u32 N | u32 D | u32 D_lo (0 in patch mode)
    | f32 hi-res features (N*D) | f32 low-res payload | u8 relevance (N)

``mode`` is 0 for vectors and 1 for patches; relevance bytes are 0/1, or 255
when unknown (ingested data).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AHDB"
VERSION = 1
PATCH = 16
_HEADER = struct.Struct("<4sHHHBBIII")
UNKNOWN_RELEVANCE = 255


class BagFormatError(ValueError):
    pass


class BadMagicError(BagFormatError):
    pass


class VersionMismatchError(BagFormatError):
    pass


class TruncatedPayloadError(BagFormatError):
    pass


@dataclass
class Bag:
    bag_id: str
    label: int
    n_classes: int
    features: np.ndarray  # (N, D)
    lowres: np.ndarray  # (N, 3, 16, 16) patches or (N, D_lo) vectors
    relevance: np.ndarray | None = None  # (N,) bool; diagnostics only

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.lowres = np.asarray(self.lowres, dtype=np.float64)
        n = self.features.shape[0]
        if n < 1 or self.features.ndim != 2:
            raise ValueError("a bag needs at least one instance and 2-d features")
        if self.lowres.shape[0] != n:
            raise ValueError(f"hi-res ({n}) and low-res ({self.lowres.shape[0]}) instance counts differ")
        if self.lowres.ndim == 4:
            if self.lowres.shape[1:] != (3, PATCH, PATCH):
                raise ValueError(f"patches must be 3x{PATCH}x{PATCH}, got {self.lowres.shape[1:]}")
            if self.lowres.min() < 0.0 or self.lowres.max() > 1.0:
                raise ValueError("pixel values must lie in [0, 1]")
        elif self.lowres.ndim != 2:
            raise ValueError("low-res payload must be patches (N,3,16,16) or vectors (N,D_lo)")
        if not 0 <= self.label < self.n_classes:
            raise ValueError(f"label {self.label} outside 0..{self.n_classes - 1}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def patch_mode(self) -> bool:
        return self.lowres.ndim == 4


@dataclass
class GenConfig:
    n_classes: int = 2
    n_bags: int = 200
    n_min: int = 128
    n_max: int = 512
    dim: int = 64
    rho: float = 0.1
    signal: float = 3.0
    noise: float = 0.5
    lowres: str = "patch"
    dim_lo: int = 8
    name: str = "synthetic"
    split: tuple = (0.8, 0.1, 0.1)


@dataclass
class DatasetManifest:
    name: str
    n_classes: int
    dim: int
    dim_lo: int
    lowres: str
    splits: dict
    config: dict
    seed: int
    split_mode: str = "random"
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for ids in self.splits.values():
            overlap = seen.intersection(ids)
            if overlap:
                raise ValueError(f"bags assigned to more than one split: {sorted(overlap)[:3]}")
            seen.update(ids)
        if self.labels and seen != set(self.labels):
            raise ValueError("splits must cover every bag exactly once")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def _check_config(cfg: GenConfig):
    if cfg.n_classes < 2:
        raise ValueError("need at least two classes")
    if cfg.n_classes > cfg.dim:
        raise ValueError("class directions need dim >= n_classes")
    if not 0.0 < cfg.rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if cfg.rho * cfg.n_min < 1.0:
        raise ValueError(f"rho * N < 1 for N={cfg.n_min}: no relevant instance possible")
    if cfg.signal <= 0:
        raise ValueError("signal strength must be positive")
    if cfg.lowres == "patch" and cfg.dim < 3:
        raise ValueError("patch rendering needs dim >= 3")
    if cfg.lowres == "vector" and not 1 <= cfg.dim_lo <= cfg.dim:
        raise ValueError("dim_lo must lie in 1..dim")
    if cfg.lowres not in ("patch", "vector"):
        raise ValueError(f"unknown low-res mode {cfg.lowres!r}")
    if not 1 <= cfg.n_min <= cfg.n_max:
        raise ValueError("need 1 <= n_min <= n_max")


def render_patches(features: np.ndarray, noise: float, rng) -> np.ndarray:
    """Paint channel i with sigmoid(feature[:, i]) and add clipped pixel noise."""
    base = 1.0 / (1.0 + np.exp(-features[:, :3]))
    img = np.broadcast_to(base[:, :, None, None], (features.shape[0], 3, PATCH, PATCH))
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def make_bag(index: int, label: int, cfg: GenConfig, rng) -> Bag:
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    n_rel = math.ceil(cfg.rho * n)
    relevant = np.zeros(n, dtype=bool)
    relevant[rng.choice(n, size=n_rel, replace=False)] = True
    feats = cfg.noise * rng.standard_normal((n, cfg.dim))
    feats[relevant, label] += cfg.signal
    # stored precision, so in-memory and on-disk bags are identical
    feats = feats.astype(np.float32).astype(np.float64)
    if cfg.lowres == "patch":
        low = render_patches(feats, cfg.noise, rng)
    else:
        low = feats[:, : cfg.dim_lo] + cfg.noise * rng.standard_normal((n, cfg.dim_lo))
    low = low.astype(np.float32).astype(np.float64)
    return Bag(f"bag{index:04d}", label, cfg.n_classes, feats, low, relevant)


def split_ids(ids, labels, ratios, rng) -> dict:
    """Stratified train/val/test split at bag level."""
    out = {"train": [], "val": [], "test": []}
    labels = np.asarray(labels)
    ids = np.asarray(ids)
    for c in np.unique(labels):
        members = ids[labels == c][rng.permutation(int((labels == c).sum()))]
        n = len(members)
        n_val = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        n_train = n - n_val - n_test
        out["train"] += members[:n_train].tolist()
        out["val"] += members[n_train : n_train + n_val].tolist()
        out["test"] += members[n_train + n_val :].tolist()
    return {k: sorted(v) for k, v in out.items()}


def generate_dataset(cfg: GenConfig, seed: int):
    """Return (manifest, list of bags). Bag ``i`` draws from its own stream
    spawned from ``seed`` so generation is order independent."""
    _check_config(cfg)
    root = np.random.SeedSequence(seed)
    bag_seqs = root.spawn(cfg.n_bags + 1)
    bags = []
    for i in range(cfg.n_bags):
        rng = np.random.default_rng(bag_seqs[i])
        bags.append(make_bag(i, i % cfg.n_classes, cfg, rng))
    split_rng = np.random.default_rng(bag_seqs[-1])
    ids = [b.bag_id for b in bags]
    labels = [b.label for b in bags]
    manifest = DatasetManifest(
        name=cfg.name,
        n_classes=cfg.n_classes,
        dim=cfg.dim,
        dim_lo=0 if cfg.lowres == "patch" else cfg.dim_lo,
        lowres=cfg.lowres,
        splits=split_ids(ids, labels, cfg.split, split_rng),
        config=json.loads(json.dumps(asdict(cfg))),
        seed=seed,
        labels=dict(zip(ids, labels)),
    )
    return manifest, bags


def resplit(manifest: DatasetManifest, seed: int, fixed_test: bool = False) -> DatasetManifest:
    """New split for one Monte Carlo fold.

    Random mode redraws an 8:1:1 (or configured) split. Fixed-test mode keeps
    the test list and splits the rest 9:1 into train/val.
    """
    rng = np.random.default_rng(seed)
    ids = sorted(manifest.labels)
    labels = [manifest.labels[i] for i in ids]
    if fixed_test:
        test = set(manifest.splits["test"])
        pool = [i for i in ids if i not in test]
        parts = split_ids(pool, [manifest.labels[i] for i in pool], (0.9, 0.1, 0.0), rng)
        splits = {"train": parts["train"], "val": parts["val"], "test": sorted(test)}
        mode = "fixed-test"
    else:
        splits = split_ids(ids, labels, tuple(manifest.config.get("split", (0.8, 0.1, 0.1))), rng)
        mode = "random"
    d = asdict(manifest)
    d.update(splits=splits, seed=seed, split_mode=mode)
    return DatasetManifest(**d)


# ---------------------------------------------------------------------------
# binary I/O
# ---------------------------------------------------------------------------

def encode_bag(bag: Bag) -> bytes:
    n, d = bag.features.shape
    mode = 1 if bag.patch_mode else 0
    d_lo = 0 if bag.patch_mode else bag.lowres.shape[1]
    if bag.relevance is None:
        rel = np.full(n, UNKNOWN_RELEVANCE, dtype=np.uint8)
    else:
        rel = np.asarray(bag.relevance, dtype=np.uint8)
    header = _HEADER.pack(MAGIC, VERSION, bag.label, bag.n_classes, mode, 0, n, d, d_lo)
    return b"".join(
        [
            header,
            bag.features.astype("<f4").tobytes(),
            bag.lowres.astype("<f4").tobytes(),
            rel.tobytes(),
        ]
    )


def decode_bag(buf: bytes, bag_id: str = "") -> Bag:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    _, version, label, n_classes, mode, _, n, d, d_lo = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"bag format version {version}, expected {VERSION}")
    low_shape = (n, 3, PATCH, PATCH) if mode == 1 else (n, d_lo)
    n_hi = n * d
    n_lo = int(np.prod(low_shape))
    need = _HEADER.size + 4 * (n_hi + n_lo) + n
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf)} bytes, expected {need}")
    off = _HEADER.size
    feats = np.frombuffer(buf, dtype="<f4", count=n_hi, offset=off).reshape(n, d)
    off += 4 * n_hi
    low = np.frombuffer(buf, dtype="<f4", count=n_lo, offset=off).reshape(low_shape)
    off += 4 * n_lo
    rel = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    relevance = None if np.any(rel == UNKNOWN_RELEVANCE) else rel.astype(bool)
    return Bag(bag_id, label, n_classes, feats.astype(np.float64), low.astype(np.float64), relevance)


def write_bag(bag: Bag, path) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id=path.stem)


def ingest_features(bag_id: str, label: int, n_classes: int, features, lowres) -> Bag:
    """Wrap externally computed features; relevance is unknown."""
    return Bag(bag_id, label, n_classes, features, lowres, relevance=None)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_dataset(root, manifest: DatasetManifest, bags) -> None:
    root = Path(root)
    (root / "bags").mkdir(parents=True, exist_ok=True)
    for bag in bags:
        write_bag(bag, root / "bags" / f"{bag.bag_id}.ahdb")
    (root / "manifest.json").write_text(manifest.to_json())


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return DatasetManifest.from_json(path.read_text())


def load_split(root, manifest: DatasetManifest, split: str):
    return [read_bag(Path(root) / "bags" / f"{i}.ahdb") for i in manifest.splits[split]]


def directory_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
