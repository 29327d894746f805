"""Training stages, selection and the three-step inference path.

``train_sd`` fits the DMIN by self-distillation and freezes its teacher
outputs over the training bags. ``train_ad`` then alternates, bag by bag,
between a pre-screener update against those frozen targets and a DMIN
fine-tune on the instances the pre-screener keeps. ``infer`` runs the
deployed path: low-res screening, selection, then the student on the kept
high-res features only.
"""

from __future__ import annotations

import logging
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, targets_digest
from .config import RunConfig
from .dmin import (
    Dmin,
    DminConfig,
    cross_entropy,
    deterministic_masks,
    gated_attention,
    loss_sd,
    project,
    sd_forward,
    student_logits,
    teacher_logits,
)
from .lipn import Lipn, cbema_update, lipn_loss, normalize_attention, select
from .metrics import MetricsReport, build_report, macro_auc, paired_t_test
from .optim import Adam

log = logging.getLogger(__name__)

MODES = ("teacher-full", "student-pruned")


class NumericError(FloatingPointError):
    """A loss or gradient went non-finite; carries the offending bag id."""

    def __init__(self, bag_id: str, stage: str, detail: str = ""):
        self.bag_id = bag_id
        self.stage = stage
        super().__init__(f"non-finite {stage} on bag {bag_id}" + (f": {detail}" if detail else ""))


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent named random stream; adding a consumer never shifts another."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(purpose.encode())]))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AHDMIL_THREADS", "1")))
    except ValueError:
        return 1


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def dmin_config(cfg: RunConfig, dim: int, n_classes: int) -> DminConfig:
    return DminConfig(
        dim=dim, n_classes=n_classes, q=cfg.q, hidden=cfg.hidden, degree=cfg.degree,
        tau=cfg.tau, gamma=cfg.gamma, r=cfg.r, k_clu=cfg.k_clu, alphas=cfg.alphas,
    )


def _check_bags(bags, what):
    if not bags:
        raise ValueError(f"{what} split is empty")


# ---------------------------------------------------------------------------
# self-distillation
# ---------------------------------------------------------------------------

def teacher_probs(dmin: Dmin, bag) -> np.ndarray:
    with T.no_grad():
        return _softmax(teacher_logits(dmin, bag.features).data)


def validate_teacher(dmin: Dmin, bags) -> dict:
    probs = np.stack([teacher_probs(dmin, b) for b in bags])
    labels = np.array([b.label for b in bags])
    auc, _ = macro_auc(probs, labels)
    ce = float(np.mean(-np.log(np.maximum(probs[np.arange(len(bags)), labels], 1e-300))))
    return {"val_auc": auc, "val_ce": ce}


def _selection_key(metrics):
    auc = metrics["val_auc"]
    return (-1.0 if auc is None else auc, -metrics["val_ce"])


def freeze_targets(dmin: Dmin, bags) -> dict:
    """Teacher attention A_HR and deterministic masks M_HR per bag."""
    out = {}
    with T.no_grad():
        for bag in bags:
            a = gated_attention(dmin, project(dmin, bag.features)).data
            out[bag.bag_id] = (a, deterministic_masks(dmin, a))
    return out


def mask_retention(masks: np.ndarray) -> float:
    return float(np.mean(masks.any(axis=1)))


def sampled_retention(dmin: Dmin, bags, rng) -> np.ndarray:
    """Per-bag r~ under the training-time Gumbel masks (the quantity the rate term controls)."""
    with T.no_grad():
        return np.array([sd_forward(dmin, b.features, rng=rng)[0].retention.item() for b in bags])


def train_sd(train_bags, val_bags, cfg: RunConfig, n_classes: int, dim: int, on_epoch=None):
    """Self-distillation. Returns (best checkpoint, frozen targets over ``train_bags``)."""
    _check_bags(train_bags, "train")
    _check_bags(val_bags, "val")
    dmin = Dmin(dmin_config(cfg, dim, n_classes), stream(cfg.seed, "sd.init"))
    opt = Adam(dmin.params, lr=cfg.lr_sd)
    order_rng = stream(cfg.seed, "sd.order")
    noise_rng = stream(cfg.seed, "sd.gumbel")

    best = dmin.copy()
    best_epoch = 0
    best_opt = opt.export()
    history = []
    best_key = None
    stale = 0
    for epoch in range(1, cfg.epochs_sd + 1):
        sums = dict.fromkeys(("loss", "cls", "clu", "dis1", "dis2", "rate", "retention"), 0.0)
        for i in order_rng.permutation(len(train_bags)):
            bag = train_bags[i]
            opt.zero_grad()
            loss, out, terms = loss_sd(dmin, bag.features, bag.label, rng=noise_rng)
            if not np.isfinite(loss.item()):
                raise NumericError(bag.bag_id, "SD loss")
            loss.backward()
            try:
                opt.step()
            except FloatingPointError as exc:
                raise NumericError(bag.bag_id, "SD gradient", str(exc)) from None
            sums["loss"] += loss.item()
            for k, v in terms.items():
                sums[k] += v.item()
            sums["retention"] += out.retention.item()
        record = {"stage": "sd", "epoch": epoch}
        record.update({k: v / len(train_bags) for k, v in sums.items()})
        record.update(validate_teacher(dmin, val_bags))
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        key = _selection_key(record)
        if best_key is None or key > best_key:
            best_key, best, best_epoch, best_opt, stale = key, dmin.copy(), epoch, opt.export(), 0
        else:
            stale += 1
            if stale >= cfg.patience_sd:
                break

    targets = freeze_targets(best, train_bags)
    sampled = sampled_retention(best, train_bags, stream(cfg.seed, "sd.retention"))
    det = np.array([mask_retention(m) for _, m in targets.values()])
    history.append({
        "stage": "sd", "event": "targets", "best_epoch": best_epoch,
        "retention_mean": float(sampled.mean()), "retention_std": float(sampled.std()),
        "target_retention_mean": float(det.mean()), "target_retention_std": float(det.std()),
    })
    if on_epoch is not None:
        on_epoch(history[-1])
    ckpt = Checkpoint(
        config=cfg, dmin=best, optimizers={"sd": best_opt}, targets_digest=targets_digest(targets),
        epoch=best_epoch, history=history, stage="sd",
    )
    return ckpt, targets


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class InferenceTrace:
    bag_id: str
    n: int
    kept: int
    frac: float
    probs: np.ndarray
    pred: int
    fallback: bool = False
    t_lowres: float = 0.0
    t_select: float = 0.0
    t_feat: float = 0.0
    t_model: float = 0.0

    @property
    def t_hires(self) -> float:
        return self.t_feat + self.t_model

    def timing_row(self) -> dict:
        return {
            "t_lowres": self.t_lowres, "t_select": self.t_select, "t_feat": self.t_feat,
            "t_model": self.t_model, "kept": self.kept, "n": self.n,
        }


def infer(bag, dmin: Dmin, lipn: Lipn) -> InferenceTrace:
    """Screen at low resolution, keep the merged selection, classify with the student."""
    clock = time.perf_counter
    with T.no_grad():
        t0 = clock()
        p1, p2 = lipn(bag.lowres, training=False)
        t1 = clock()
        kept, frac, fallback = select(p1.data, p2.data, lipn.gamma, lipn.r)
        t2 = clock()
        feats = np.ascontiguousarray(bag.features[kept])
        t3 = clock()
        probs = _softmax(student_logits(dmin, feats).data)
        t4 = clock()
    if fallback:
        log.warning("bag %s: empty selection, kept top %d by score", bag.bag_id, kept.size)
    return InferenceTrace(
        bag.bag_id, bag.n, int(kept.size), float(frac), probs, int(probs.argmax()), fallback,
        t1 - t0, t2 - t1, t3 - t2, t4 - t3,
    )


def infer_all(bag, dmin: Dmin) -> InferenceTrace:
    """Reference path: every high-res instance through the same student read."""
    clock = time.perf_counter
    with T.no_grad():
        t0 = clock()
        feats = np.ascontiguousarray(bag.features[np.arange(bag.n)])
        t1 = clock()
        probs = _softmax(student_logits(dmin, feats).data)
        t2 = clock()
    return InferenceTrace(
        bag.bag_id, bag.n, bag.n, 1.0, probs, int(probs.argmax()), False, 0.0, 0.0, t1 - t0, t2 - t1,
    )


def infer_teacher(bag, dmin: Dmin) -> InferenceTrace:
    clock = time.perf_counter
    t0 = clock()
    probs = teacher_probs(dmin, bag)
    return InferenceTrace(
        bag.bag_id, bag.n, bag.n, 1.0, probs, int(probs.argmax()), t_model=clock() - t0,
    )


def _map(fn, items):
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evaluate(bags, dmin: Dmin, lipn: Lipn | None, mode: str, against: MetricsReport | None = None,
             n_bins: int = 10):
    """Metrics over ``bags`` for one read path. Returns (report, traces).

    ``against`` adds a paired t-test on per-bag correctness, keyed ``"other"``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not bags:
        raise ValueError("cannot evaluate an empty split")
    if mode == "student-pruned":
        if lipn is None:
            raise ValueError("student-pruned evaluation needs a checkpoint with the pre-screener")
        traces = _map(lambda b: infer(b, dmin, lipn), bags)
    else:
        traces = _map(lambda b: infer_teacher(b, dmin), bags)
    probs = np.stack([t.probs for t in traces])
    labels = np.array([b.label for b in bags])
    report = build_report(probs, labels, [t.frac for t in traces], n_bins)
    if against is not None:
        report.p_value_vs["other"] = paired_t_test(report.per_bag_correct, against.per_bag_correct)
    return report, traces


def compare(a: MetricsReport, b: MetricsReport, name: str) -> float:
    """Paired t-test on per-bag correctness; stored on ``a`` under ``name``."""
    p = paired_t_test(a.per_bag_correct, b.per_bag_correct)
    a.p_value_vs[name] = p
    return p


# ---------------------------------------------------------------------------
# asymmetric distillation
# ---------------------------------------------------------------------------

def draw_mode(rng, p: float) -> str:
    """Soft with probability ``p``, else hard."""
    return "soft" if rng.random() < p else "hard"


def _lipn_params(lipn: Lipn) -> dict:
    params = {f"b1/{k}": v for k, v in lipn.branch1.params.items()}
    params.update({f"b2/{k}": v for k, v in lipn.branch2.params.items()})
    return params


def _snapshot_lipn(lipn: Lipn) -> Lipn:
    other = Lipn.__new__(Lipn)
    other.__dict__.update(lipn.__dict__)
    other.branch1 = _copy_branch(lipn.branch1)
    other.branch2 = _copy_branch(lipn.branch2)
    return other


def _copy_branch(branch):
    other = branch.__class__.__new__(branch.__class__)
    other.__dict__.update(branch.__dict__)
    other.params = {n: T.Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in branch.params.items()}
    other.buffers = {n: b.copy() for n, b in branch.buffers.items()}
    return other


def validate_pruned(dmin: Dmin, lipn: Lipn, bags) -> dict:
    traces = [infer(b, dmin, lipn) for b in bags]
    probs = np.stack([t.probs for t in traces])
    labels = np.array([b.label for b in bags])
    auc, _ = macro_auc(probs, labels)
    ce = float(np.mean(-np.log(np.maximum(probs[np.arange(len(bags)), labels], 1e-300))))
    return {"val_auc": auc, "val_ce": ce, "val_retention": float(np.mean([t.frac for t in traces]))}


def train_ad(train_bags, val_bags, sd_ckpt: Checkpoint, targets: dict, cfg: RunConfig, on_epoch=None):
    """Alternating pre-screener / DMIN updates. Returns the best checkpoint."""
    _check_bags(train_bags, "train")
    _check_bags(val_bags, "val")
    missing = [b.bag_id for b in train_bags if b.bag_id not in targets]
    if missing:
        raise ValueError(f"no frozen targets for bags {missing[:3]}")
    if targets_digest({b.bag_id: targets[b.bag_id] for b in train_bags}) != sd_ckpt.targets_digest:
        log.warning("frozen targets do not match the digest recorded by the SD checkpoint")
    first = train_bags[0]
    n_classes = sd_ckpt.dmin.cfg.n_classes
    mode_name = "patch" if first.patch_mode else "vector"
    dim_lo = 0 if first.patch_mode else first.lowres.shape[1]
    lipn = Lipn(
        n_classes, stream(cfg.seed, "ad.lipn1"), stream(cfg.seed, "ad.lipn2"), mode_name, dim_lo,
        lam=cfg.lam, gamma=cfg.gamma, r=cfg.r,
    )
    dmin = sd_ckpt.dmin.copy()
    opt_lipn = Adam(_lipn_params(lipn), lr=cfg.lr_lipn)
    opt_dmin = Adam(dmin.params, lr=cfg.lr_ad)
    order_rng = stream(cfg.seed, "ad.order")
    mode_rng = stream(cfg.seed, "ad.mode")
    soft_targets = {b.bag_id: normalize_attention(targets[b.bag_id][0]) for b in train_bags}

    history = []
    best = (None, dmin.copy(), _snapshot_lipn(lipn), 0, {})
    for epoch in range(1, cfg.epochs_ad + 1):
        sums = dict.fromkeys(("lipn", "dis3", "rate", "ce", "kept"), 0.0)
        modes = []
        n_fallback = 0
        for i in order_rng.permutation(len(train_bags)):
            bag = train_bags[i]
            mode = draw_mode(mode_rng, cfg.p)
            modes.append(mode[0])
            target = soft_targets[bag.bag_id] if mode == "soft" else targets[bag.bag_id][1]

            opt_lipn.zero_grad()
            p1, p2 = lipn(bag.lowres, training=True)
            loss, terms = lipn_loss(p1, p2, target, mode, cfg.r, cfg.gamma, cfg.betas)
            if not np.isfinite(loss.item()):
                raise NumericError(bag.bag_id, "pre-screener loss")
            loss.backward()
            try:
                opt_lipn.step()
            except FloatingPointError as exc:
                raise NumericError(bag.bag_id, "pre-screener gradient", str(exc)) from None

            # selection reuses this iteration's screening pass
            kept, frac, fallback = select(p1.data, p2.data, cfg.gamma, cfg.r)
            if fallback:
                n_fallback += 1
                log.info("bag %s: empty selection, fell back to top %d", bag.bag_id, kept.size)
            opt_dmin.zero_grad()
            ce = cross_entropy(student_logits(dmin, bag.features[kept]), bag.label)
            if not np.isfinite(ce.item()):
                raise NumericError(bag.bag_id, "fine-tune loss")
            ce.backward()
            try:
                opt_dmin.step()
            except FloatingPointError as exc:
                raise NumericError(bag.bag_id, "fine-tune gradient", str(exc)) from None

            sums["lipn"] += loss.item()
            sums["dis3"] += terms["dis3"].item()
            sums["rate"] += terms["rate"].item()
            sums["ce"] += ce.item()
            sums["kept"] += frac
        cbema_update(lipn)
        record = {"stage": "ad", "epoch": epoch}
        record.update({k: v / len(train_bags) for k, v in sums.items()})
        record.update(
            n_soft=modes.count("s"), n_hard=modes.count("h"), n_fallback=n_fallback, modes="".join(modes)
        )
        record.update(validate_pruned(dmin, lipn, val_bags))
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        key = _selection_key(record)
        if best[0] is None or key > best[0]:
            opts = {"ad": opt_dmin.export(), "lipn": opt_lipn.export()}
            best = (key, dmin.copy(), _snapshot_lipn(lipn), epoch, opts)

    _, best_dmin, best_lipn, best_epoch, best_opts = best
    return Checkpoint(
        config=cfg, dmin=best_dmin, lipn=best_lipn, optimizers=best_opts,
        targets_digest=sd_ckpt.targets_digest, epoch=best_epoch,
        history=list(sd_ckpt.history) + history, stage="ad",
    )


# ---------------------------------------------------------------------------
# whole runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    sd: Checkpoint
    ad: Checkpoint
    targets: dict
    teacher: MetricsReport
    student: MetricsReport
    traces: list = field(default_factory=list)


def run(manifest, bags_by_id: dict, cfg: RunConfig, split: str = "test", on_epoch=None) -> RunResult:
    """SD, then AD, then both read paths on ``split``."""
    pick = lambda name: [bags_by_id[i] for i in manifest.splits[name]]  # noqa: E731
    train, val, test = pick("train"), pick("val"), pick(split)
    sd, targets = train_sd(train, val, cfg, manifest.n_classes, manifest.dim, on_epoch)
    ad = train_ad(train, val, sd, targets, cfg, on_epoch)
    teacher, _ = evaluate(test, ad.dmin, None, "teacher-full")
    student, traces = evaluate(test, ad.dmin, ad.lipn, "student-pruned", against=teacher)
    return RunResult(sd, ad, targets, teacher, student, traces)


def monte_carlo(manifest, bags_by_id: dict, cfg: RunConfig, seeds, fixed_test: bool = False) -> list:
    """One full run per seed on a fresh stratified resplit of the same bags."""
    from .datagen import resplit

    results = []
    for seed in seeds:
        fold = resplit(manifest, seed, fixed_test=fixed_test)
        results.append(run(fold, bags_by_id, cfg.replace(seed=seed)))
    return results

