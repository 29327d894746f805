"""Acceptance suite: one test per criterion, at the stated tolerances.

The end-to-end criteria (6, 7, 8) train on the default synthetic dataset and
take roughly 40 minutes together on one core.
"""

import json
import time

import numpy as np
import pytest

from ahdmil import datagen as dg
from ahdmil import dmin as D
from ahdmil import functional as Fn
from ahdmil import lipn as L
from ahdmil import metrics as M
from ahdmil import pipeline as pl
from ahdmil import tensor as T
from ahdmil.checkpoint import save_checkpoint
from ahdmil.cka import cka_forward, chebyshev_basis
from ahdmil.config import RunConfig
from ahdmil.gradcheck import finite_diff_check
from ahdmil.tensor import Tensor
from oracles import auc_pairs, bins_ref, brier_ref, f1_ref, random_instance

GRAD_TOL = 1e-4
SEEDS = (7, 8, 9)

# measured values of the end-to-end criteria, printed in the run summary
MEASURED = {}


# ---------------------------------------------------------------------------
# shared end-to-end runs on the default dataset
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def default_data():
    manifest, bags = dg.generate_dataset(dg.GenConfig(), 7)
    by_id = {b.bag_id: b for b in bags}
    split = {k: [by_id[i] for i in v] for k, v in manifest.splits.items()}
    return manifest, split


@pytest.fixture(scope="session")
def runs(default_data):
    manifest, split = default_data
    out = {}
    for seed in SEEDS:
        cfg = RunConfig(seed=seed)
        t0 = time.perf_counter()
        sd, targets = pl.train_sd(split["train"], split["val"], cfg, manifest.n_classes, manifest.dim)
        sd_seconds = time.perf_counter() - t0
        ad = pl.train_ad(split["train"], split["val"], sd, targets, cfg)
        teacher, _ = pl.evaluate(split["test"], ad.dmin, None, "teacher-full")
        student, traces = pl.evaluate(split["test"], ad.dmin, ad.lipn, "student-pruned", against=teacher)
        out[seed] = dict(sd=sd, sd_seconds=sd_seconds, ad=ad, teacher=teacher, student=student, traces=traces)
    return out


# ---------------------------------------------------------------------------
# 1. gradient oracle suite
# ---------------------------------------------------------------------------

def _weighted(fn, shape_seed=0):
    cache = {}

    def f(t):
        y = fn(t)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(shape_seed).standard_normal(y.shape)
        return T.tsum(T.mul(y, cache["w"]))

    return f


def _op_cases():
    rng = np.random.default_rng(100)
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = x + np.sign(x) * 0.1  # keep relu/abs away from their kinks
    img = rng.standard_normal((2, 3, 6, 6))
    return {
        "add": (lambda t: T.add(t[0], t[1]), [x, y]),
        "sub": (lambda t: T.sub(t[0], t[1]), [x, y]),
        "mul": (lambda t: T.mul(t[0], t[1]), [x, y]),
        "div": (lambda t: T.div(t[0], t[1]), [x, pos]),
        "scale": (lambda t: T.scale(t[0], -2.5), [x]),
        "power": (lambda t: T.power(t[0], 3.0), [x]),
        "exp": (lambda t: T.exp(t[0]), [x]),
        "log": (lambda t: T.log(t[0]), [pos]),
        "tanh": (lambda t: T.tanh(t[0]), [x]),
        "sigmoid": (lambda t: T.sigmoid(t[0]), [x]),
        "relu": (lambda t: T.relu(t[0]), [away]),
        "abs": (lambda t: T.tabs(t[0]), [away]),
        "sum": (lambda t: T.tsum(t[0], axis=1, keepdims=True), [x]),
        "mean": (lambda t: T.mean(t[0], axis=0), [x]),
        "reshape": (lambda t: T.reshape(t[0], (4, 3)), [x]),
        "transpose": (lambda t: T.transpose(t[0]), [x]),
        "take": (lambda t: T.take(t[0], np.array([2, 0, 2])), [x]),
        "concatenate": (lambda t: T.concatenate([t[0], t[1]], axis=1), [x, y]),
        "stack": (lambda t: T.stack([t[0], t[1]], axis=0), [x, y]),
        "matmul": (lambda t: T.matmul(t[0], t[1]), [x, y.T]),
        "softmax": (lambda t: T.softmax(t[0], axis=-1), [x]),
        "log_softmax": (lambda t: T.log_softmax(t[0], axis=-1), [x]),
        "straight_through": (lambda t: T.straight_through(t[0], 0.5), [np.where(np.abs(x - 0.5) < 1e-3, 0.7, x)]),
        "conv2d": (lambda t: Fn.conv2d(t[0], t[1], stride=2, padding=1), [img, rng.standard_normal((4, 3, 3, 3))]),
        "depthwise": (lambda t: Fn.depthwise_conv2d(t[0], t[1], stride=1, padding=1),
                      [img, rng.standard_normal((3, 1, 3, 3))]),
        "batchnorm": (lambda t: Fn.batchnorm2d(t[0], t[1], t[2], np.zeros(3), np.ones(3), True, update_stats=False),
                      [img, rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        "avgpool": (lambda t: Fn.global_avgpool(t[0]), [img]),
        "linear": (lambda t: Fn.linear(t[0], t[1], t[2]), [x, rng.standard_normal((4, 2)), rng.standard_normal(2)]),
        "chebyshev_head": (lambda t: cka_forward(t[0], t[1]), [rng.standard_normal(5), rng.standard_normal((5, 6))]),
        "teacher_aggregate": (lambda t: D.teacher_aggregate(t[0], t[1]),
                              [rng.standard_normal((7, 4)), rng.standard_normal((7, 2))]),
        "student_aggregate": (lambda t: D.student_aggregate(t[0], t[1], np.array([[1, 0], [1, 1], [0, 1]] * 2 + [[1, 1]],
                                                                                 dtype=float))[0],
                              [rng.standard_normal((7, 4)), rng.standard_normal((7, 2))]),
        "gumbel_sigmoid": (lambda t: D.gumbel_sigmoid(t[0], 0.7, np.full((3, 4), 0.2), np.full((3, 4), -0.1)), [x]),
        "kl_divergence": (lambda t: D.kl_divergence(t[0], t[1]), [rng.standard_normal(3), rng.standard_normal(3)]),
        "cross_entropy": (lambda t: D.cross_entropy(t[0], 1), [rng.standard_normal(3)]),
    }


def _sd_loss_case():
    model = D.Dmin(D.DminConfig(dim=6, q=8, hidden=5, degree=3, k_clu=3), np.random.default_rng(1))
    feats = np.random.default_rng(2).standard_normal((12, 6))
    rng = np.random.default_rng(3)
    noise = (D.gumbel((12, 2), rng), D.gumbel((12, 2), rng))
    names = sorted(model.params)
    with T.no_grad():
        out, _ = D.sd_forward(model, feats, noise=noise)
    scores = T.sigmoid(T.scale(out.attention + (noise[0] - noise[1]), 1 / 0.7)).data
    assert np.min(np.abs(scores - 0.5)) >= 1e-3

    def f(t):
        for n, v in zip(names, t[1:]):
            model.params[n] = v
        return D.loss_sd(model, t[0], 1, noise=noise)[0]

    return f, [feats] + [model.params[n].data.copy() for n in names]


def _relu_margin(fn):
    """Smallest |input| seen by any ReLU while ``fn`` runs."""
    seen = []
    orig = T.relu

    def spy(a):
        a = T.as_tensor(a)
        seen.append(float(np.min(np.abs(a.data))))
        return orig(a)

    T.relu = spy
    try:
        with T.no_grad():
            fn()
    finally:
        T.relu = orig
    return min(seen)


def _lipn_loss_case(mode, branch_mode):
    rng = np.random.default_rng(4)
    if branch_mode == "patch":
        x = rng.uniform(size=(4, 3, 16, 16))
        names = ["ConvBN-1.bn.g", "ConvBN-3.w", "UIB-1.middle.bn.g", "Linear-1.w", "Linear-1.b"]
        dim_lo = 0
    else:
        x = rng.standard_normal((6, 4))
        names = ["mlp0.w", "mlp1.b", "mlp2.w", "mlp2.b"]
        dim_lo = 4
    net = L.Lipn(2, np.random.default_rng(5), np.random.default_rng(6), branch_mode, dim_lo)
    n = x.shape[0]
    if mode == "hard":
        # |B(P) - M| has a kink wherever B(P) == M, so the difference check runs
        # where every entry disagrees; the matched case is checked exactly below.
        L.cbema_update(net, 0.5)
        for _ in range(100):
            with T.no_grad():
                p1, p2 = net(x, training=True, update_stats=False)
            if np.min(np.abs(p1.data - 0.5)) >= 1e-3:
                break
            # nudge: redraw the inputs until no score sits near the threshold
            x = rng.uniform(size=x.shape) if branch_mode == "patch" else rng.standard_normal(x.shape)
        assert min(np.min(np.abs(p1.data - 0.5)), np.min(np.abs(p2.data - 0.5))) >= 1e-3
        target = 1.0 - T.binarize(p1.data, 0.5)
    else:
        with T.no_grad():
            p1, p2 = net(x, training=True, update_stats=False)
        target = rng.random((n, 2))
        assert min(np.min(np.abs(p1.data - target)), np.min(np.abs(p2.data - target))) >= 1e-3

    # thousands of ReLU units in the conv branch; the step must stay well inside
    # the distance of the nearest one from its kink
    h = 1e-5
    if branch_mode == "patch":
        h = 1e-6
        assert _relu_margin(lambda: net(x, training=True, update_stats=False)) > 10 * h

    def f(t):
        k = len(names)
        for nm, v in zip(names, t[:k]):
            net.branch1.params[nm] = v
        for nm, v in zip(names, t[k:]):
            net.branch2.params[nm] = v
        q1, q2 = net(x, training=True, update_stats=False)
        return L.lipn_loss(q1, q2, target, mode, r=0.6)[0]

    point = [net.branch1.params[nm].data.copy() for nm in names] + [net.branch2.params[nm].data.copy() for nm in names]
    return f, point, h


def test_criterion_01_gradient_oracle_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, point) in _op_cases().items():
        worst[name] = finite_diff_check(_weighted(fn), point)
    worst["L_SD"] = finite_diff_check(*_sd_loss_case())
    for mode in ("hard", "soft"):
        for branch_mode in ("vector", "patch"):
            f, point, h = _lipn_loss_case(mode, branch_mode)
            worst[f"L_LIPN[{mode},{branch_mode}]"] = finite_diff_check(f, point, h=h)
    elapsed = time.perf_counter() - t0
    failing = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
    assert not failing, failing
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


def test_criterion_01_hard_crd_matched_entries_have_zero_gradient():
    p = np.array([[0.8, 0.1], [0.3, 0.9]])
    p1, p2 = Tensor(p, requires_grad=True), Tensor(p.copy(), requires_grad=True)
    L.crd_loss_hard(p1, p2, T.binarize(p, 0.5)).backward()
    assert np.array_equal(p1.grad, np.zeros_like(p)) and np.array_equal(p2.grad, np.zeros_like(p))


# ---------------------------------------------------------------------------
# 2. Chebyshev identity
# ---------------------------------------------------------------------------

def test_criterion_02_chebyshev_identity():
    theta = np.linspace(0.0, np.pi, 1000)
    basis = chebyshev_basis(np.cos(theta), 16)
    k = np.arange(17)
    err = np.max(np.abs(basis - np.cos(np.outer(theta, k))))
    assert err <= 1e-9, err


# ---------------------------------------------------------------------------
# 3. collapse chain
# ---------------------------------------------------------------------------

def test_criterion_03_collapse_chain():
    rng = np.random.default_rng(30)
    model = D.Dmin(D.DminConfig(dim=8, q=16, hidden=8, degree=4), np.random.default_rng(31))
    worst = 0.0
    with T.no_grad():
        for _ in range(100):
            n = int(rng.integers(1, 40))
            x = rng.standard_normal((n, 8)) * rng.uniform(0.5, 5.0)
            s = D.student_logits(model, x, np.ones((n, 2))).data
            t = D.teacher_logits(model, x).data
            worst = max(worst, float(np.max(np.abs(s - t))))
    assert worst <= 1e-9, worst

    _, bags = dg.generate_dataset(dg.GenConfig(n_bags=20, n_min=10, n_max=30, dim=8), 32)
    lipn = L.Lipn(2, np.random.default_rng(33), np.random.default_rng(34), "patch")
    for b in (lipn.branch1, lipn.branch2):
        b.params["Linear-1.b"].data[:] = 1e3
    for bag in bags:
        tr = pl.infer(bag, model, lipn)
        assert tr.kept == bag.n
        assert np.max(np.abs(tr.probs - pl.teacher_probs(model, bag))) <= 1e-9
        assert tr.pred == int(np.argmax(pl.teacher_probs(model, bag)))


# ---------------------------------------------------------------------------
# 4. straight-through contract
# ---------------------------------------------------------------------------

def test_criterion_04_straight_through_contract():
    x = Tensor(np.array([0.2, 0.5, 0.5000001, 0.9, -3.0, 7.0]), requires_grad=True)
    y = T.straight_through(x, 0.5)
    assert y.data.tolist() == [0.0, 0.0, 1.0, 1.0, 0.0, 1.0]
    upstream = np.array([0.3, -1.0, 2.5, 0.0, 1e-7, -4.0])
    y.backward(upstream)
    assert np.array_equal(x.grad, upstream)


# ---------------------------------------------------------------------------
# 5. architectural fidelity
# ---------------------------------------------------------------------------

LAYER_TABLE = [
    ("ConvBN-1", (1, 16, 8, 8)), ("ConvBN-2", (1, 16, 4, 4)), ("ConvBN-3", (1, 16, 4, 4)),
    ("ConvBN-4", (1, 48, 2, 2)), ("ConvBN-5", (1, 24, 2, 2)), ("UIB-1", (1, 48, 1, 1)),
    ("UIB-2", (1, 64, 1, 1)), ("AvgPool", (1, 64, 1, 1)), ("ConvBN-6", (1, 64, 1, 1)),
    ("Flatten", (1, 64)), ("Linear-1", (1, 2)),
]


def test_criterion_05_layer_table():
    branch = L.LipnBranch(2, np.random.default_rng(0), "patch")
    trace = []
    with T.no_grad():
        branch.logits(np.random.default_rng(1).uniform(size=(1, 3, 16, 16)), trace=trace)
    assert len(trace) == len(LAYER_TABLE)
    for got, want in zip(trace, LAYER_TABLE):
        assert got == want


# ---------------------------------------------------------------------------
# 6. rate control
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_rate_control(runs):
    run = runs[7]
    summary = run["sd"].history[-1]
    assert summary["event"] == "targets"
    MEASURED["6 sampled retention (mean, std)"] = (summary["retention_mean"], summary["retention_std"])
    MEASURED["6 deterministic target retention"] = summary["target_retention_mean"]
    MEASURED["6 SD wall time s / best epoch"] = (run["sd_seconds"], summary["best_epoch"])
    assert abs(summary["retention_mean"] - 0.6) <= 0.05, summary
    assert run["sd_seconds"] < 600.0, run["sd_seconds"]


# ---------------------------------------------------------------------------
# 7. end-to-end synthetic performance
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_end_to_end_auc(runs):
    student = np.mean([runs[s]["student"].auc for s in SEEDS])
    teacher = np.mean([runs[s]["teacher"].auc for s in SEEDS])
    MEASURED["7 student / teacher AUC per seed"] = [(runs[s]["student"].auc, runs[s]["teacher"].auc) for s in SEEDS]
    assert student >= 0.95, student
    assert abs(student - teacher) <= 0.02, (student, teacher)


# ---------------------------------------------------------------------------
# 8. pruning economy
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_pruning_economy(runs, default_data):
    _, split = default_data
    run = runs[7]
    r = run["ad"].config.r
    processed = sum(t.kept for t in run["traces"]) / sum(t.n for t in run["traces"])
    assert processed <= r + 0.1, processed

    dmin, lipn = run["ad"].dmin, run["ad"].lipn
    pruned = all_path = 0.0
    for bag in split["test"]:
        # best of three per bag damps scheduler noise
        pruned += min(pl.infer(bag, dmin, lipn).t_hires for _ in range(3))
        all_path += min(pl.infer_all(bag, dmin).t_hires for _ in range(3))
    reduction = 1.0 - pruned / all_path
    MEASURED["8 processed fraction"] = processed
    MEASURED["8 hi-res time pruned / all s, reduction"] = (pruned, all_path, reduction)
    assert reduction >= 0.25, (reduction, pruned, all_path)


# ---------------------------------------------------------------------------
# 9. CBEMA algebra
# ---------------------------------------------------------------------------

def _flat(branch):
    return np.concatenate([v.ravel() for _, v in sorted(branch.arrays().items())])


def _pair(seed):
    return L.Lipn(2, np.random.default_rng(seed), np.random.default_rng(seed + 1), "patch")


def test_criterion_09_cbema_algebra():
    net = _pair(90)
    a1, a2 = _flat(net.branch1), _flat(net.branch2)
    L.cbema_update(net, 0.0)
    assert np.max(np.abs(_flat(net.branch1) - a1)) <= 1e-12 and np.max(np.abs(_flat(net.branch2) - a2)) <= 1e-12

    net = _pair(92)
    L.cbema_update(net, 0.5)
    assert np.max(np.abs(_flat(net.branch1) - _flat(net.branch2))) <= 1e-12

    for lam in (0.1, 0.2, 0.35, 0.49):
        net = _pair(94)
        d0 = _flat(net.branch1) - _flat(net.branch2)
        L.cbema_update(net, lam)
        d1 = _flat(net.branch1) - _flat(net.branch2)
        assert np.max(np.abs(d1 - (1 - 2 * lam) * d0)) <= 1e-12, lam


# ---------------------------------------------------------------------------
# 10. metrics oracles (see test_metrics for the full brute-force sweep)
# ---------------------------------------------------------------------------

def test_criterion_10_metrics_oracles():
    rng = np.random.default_rng(1000)
    for _ in range(1000):
        probs, labels, c = random_instance(rng)
        auc, _ = M.macro_auc(probs, labels)
        refs = [auc_pairs(probs, labels, 1)] if c == 2 else [auc_pairs(probs, labels, k) for k in range(c)]
        refs = [v for v in refs if v is not None]
        if refs:
            assert abs(auc - np.mean(refs)) <= 1e-12
        else:
            assert auc is None
        preds = probs.argmax(axis=1)
        assert abs(M.macro_f1(preds, labels, c) - f1_ref(preds, labels, c)) <= 1e-12
        assert abs(M.brier(probs, labels) - brier_ref(probs, labels)) <= 1e-12
        conf, hit = M.calibration_inputs(probs, labels)
        for got, members in zip(M.calibration_curve(conf, hit, 10), bins_ref(conf, hit, 10)):
            assert got.count == len(members)
            if members:
                assert abs(got.mean_conf - np.mean(conf[members])) <= 1e-12
                assert abs(got.obs_freq - np.mean(hit[members])) <= 1e-12
    p = M.paired_t_test([1.0, 2, 3, 4, 5], [0.0] * 5)
    assert abs(p - 0.0132) <= 1e-3, p


# ---------------------------------------------------------------------------
# 11. determinism
# ---------------------------------------------------------------------------

def _small_run(root):
    manifest, bags = dg.generate_dataset(dg.GenConfig(n_bags=24, n_min=10, n_max=20, dim=8), 5)
    by_id = {b.bag_id: b for b in bags}
    cfg = RunConfig(q=16, hidden=8, degree=4, k_clu=2, epochs_sd=2, epochs_ad=2, lr_lipn=1e-3, seed=5)
    res = pl.run(manifest, by_id, cfg)
    root.mkdir()
    save_checkpoint(res.sd, root / "sd.ahck")
    save_checkpoint(res.ad, root / "ad.ahck")
    reports = {"teacher": res.teacher.to_dict(), "student": res.student.to_dict()}
    (root / "report.json").write_text(json.dumps(reports, sort_keys=True))
    return root


def test_criterion_11_determinism(tmp_path):
    a = _small_run(tmp_path / "a")
    b = _small_run(tmp_path / "b")
    for name in ("sd.ahck", "ad.ahck", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
