"""Binary containers for checkpoints and frozen distillation targets.

Layout (little-endian)::

    magic (4 bytes) | u16 version | u32 header length | JSON header (UTF-8)
    | f64 blocks, row-major, in the order of header["blocks"]

``header["blocks"]`` lists ``{"name", "shape"}``; parameters round-trip
bit-exactly. Checkpoints use magic ``AHCK``, target files ``AHTG``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dmin import Dmin, DminConfig
from .lipn import Lipn

CKPT_MAGIC = b"AHCK"
TARGETS_MAGIC = b"AHTG"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def write_container(path, magic: bytes, header: dict, arrays: dict) -> None:
    header = dict(header)
    header["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    text = json.dumps(header, sort_keys=True).encode()
    parts = [_PREFIX.pack(magic, FORMAT_VERSION, len(text)), text]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    Path(path).write_bytes(b"".join(parts))


def read_container(path, magic: bytes) -> tuple:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size or buf[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    _, version, hlen = _PREFIX.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = _PREFIX.size
    header = json.loads(buf[off : off + hlen].decode())
    off += hlen
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(buf):
            raise CheckpointError(f"{path}: truncated block {block['name']}")
        arrays[block["name"]] = np.frombuffer(buf, "<f8", count, off).reshape(shape).copy()
        off += 8 * count
    return header, arrays


def arrays_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    config: RunConfig
    dmin: Dmin
    lipn: Lipn | None = None
    optimizers: dict = field(default_factory=dict)  # name -> exported Adam arrays
    targets_digest: str = ""
    epoch: int = 0
    history: list = field(default_factory=list)
    stage: str = "sd"

    @property
    def seed(self) -> int:
        return self.config.seed


def _dmin_cfg_dict(cfg: DminConfig) -> dict:
    return {
        "dim": cfg.dim, "n_classes": cfg.n_classes, "q": cfg.q, "hidden": cfg.hidden,
        "degree": cfg.degree, "tau": cfg.tau, "gamma": cfg.gamma, "r": cfg.r,
        "k_clu": cfg.k_clu, "alphas": list(cfg.alphas),
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"dmin/{k}": v for k, v in ckpt.dmin.arrays().items()}
    lipn_meta = None
    if ckpt.lipn is not None:
        b1 = ckpt.lipn.branch1
        lipn_meta = {
            "mode": b1.mode, "dim_lo": b1.dim_lo, "n_classes": b1.n_classes,
            "lam": ckpt.lipn.lam, "gamma": ckpt.lipn.gamma, "r": ckpt.lipn.r,
        }
        arrays.update({f"lipn1/{k}": v for k, v in b1.arrays().items()})
        arrays.update({f"lipn2/{k}": v for k, v in ckpt.lipn.branch2.arrays().items()})
    for opt, exported in sorted(ckpt.optimizers.items()):
        arrays.update({f"optim/{opt}/{k}": v for k, v in exported.items()})
    header = {
        "format": "ahdmil-checkpoint",
        "seed": ckpt.seed,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_dict(),
        "dmin": _dmin_cfg_dict(ckpt.dmin.cfg),
        "lipn": lipn_meta,
        "targets_digest": ckpt.targets_digest,
        "history": ckpt.history,
    }
    write_container(path, CKPT_MAGIC, header, arrays)


def _group(arrays, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path, CKPT_MAGIC)
    config = RunConfig.from_dict(header["config"])
    dcfg = DminConfig(**header["dmin"])
    dmin = Dmin(dcfg, np.random.default_rng(0))
    dmin.load_arrays(_group(arrays, "dmin/"))
    lipn = None
    meta = header["lipn"]
    if meta is not None:
        rng = np.random.default_rng(0)
        lipn = Lipn(meta["n_classes"], rng, rng, meta["mode"], meta["dim_lo"],
                    meta["lam"], meta["gamma"], meta["r"])
        lipn.branch1.load_arrays(_group(arrays, "lipn1/"))
        lipn.branch2.load_arrays(_group(arrays, "lipn2/"))
    optim = {}
    for key in arrays:
        if key.startswith("optim/"):
            name = key.split("/")[1]
            optim.setdefault(name, _group(arrays, f"optim/{name}/"))
    return Checkpoint(
        config=config, dmin=dmin, lipn=lipn, optimizers=optim,
        targets_digest=header["targets_digest"], epoch=header["epoch"],
        history=header["history"], stage=header["stage"],
    )


def _target_arrays(targets: dict) -> dict:
    arrays = {}
    for bag_id in sorted(targets):
        a, m = targets[bag_id]
        arrays[f"{bag_id}/A"] = a
        arrays[f"{bag_id}/M"] = m
    return arrays


def targets_digest(targets: dict) -> str:
    return arrays_digest(_target_arrays(targets))


def save_targets(targets: dict, path) -> str:
    """``targets`` maps bag id -> (attention (N,C), masks (N,C)). Returns the digest."""
    arrays = _target_arrays(targets)
    write_container(path, TARGETS_MAGIC, {"format": "ahdmil-targets"}, arrays)
    return arrays_digest(arrays)


def load_targets(path) -> dict:
    _, arrays = read_container(path, TARGETS_MAGIC)
    out = {}
    for key, v in arrays.items():
        bag_id, kind = key.rsplit("/", 1)
        out.setdefault(bag_id, [None, None])[0 if kind == "A" else 1] = v
    return {k: tuple(v) for k, v in out.items()}
