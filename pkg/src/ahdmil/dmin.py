"""Dynamic multi-instance network.

One parameter set serves two read paths. The teacher pools every instance
with a per-class softmax over gated attention logits; the student pools only
the instances its straight-through Gumbel masks keep. Both feed the same
Chebyshev head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cka import cka_logits, init_xavier
from .tensor import Tensor

ALPHAS = (0.7, 0.3, 0.5, 0.5, 2.0)
MASK_EPS = 1e-12


@dataclass
class DminConfig:
    dim: int
    n_classes: int = 2
    q: int = 512
    hidden: int = 256
    degree: int = 12
    tau: float = 0.7
    gamma: float = 0.5
    r: float = 0.6
    k_clu: int = 8
    alphas: tuple = ALPHAS

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.r <= 1.0:
            raise ValueError("r must lie in (0, 1]")
        if len(self.alphas) != 5:
            raise ValueError("need five loss weights")


def _xavier(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


class Dmin:
    """Parameters live in ``self.params``; nothing else is learnable."""

    def __init__(self, cfg: DminConfig, rng):
        self.cfg = cfg
        c, q, h, k = cfg.n_classes, cfg.q, cfg.hidden, cfg.degree
        shapes = {
            "proj.w": _xavier(rng, cfg.dim, q),
            "proj.b": np.zeros(q),
            "att.V": _xavier(rng, q, h),
            "att.U": _xavier(rng, q, h),
            "att.W": _xavier(rng, h, c),
            "cka.coef": init_xavier(q, k, c, rng).coef.data,
            "clu.w": _xavier(rng, q, 2, shape=(c, q, 2)),
            "clu.b": np.zeros((c, 2)),
        }
        self.params = {name: Tensor(v, requires_grad=True, name=name) for name, v in shapes.items()}

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def copy(self) -> "Dmin":
        other = Dmin.__new__(Dmin)
        other.cfg = self.cfg
        other.params = {
            n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()
        }
        return other

    def arrays(self) -> dict:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: dict):
        for n, p in self.params.items():
            if arrays[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {arrays[n].shape} != model shape {p.shape}")
            p.data = np.array(arrays[n], dtype=np.float64)


@dataclass
class SdForwardOutput:
    attention: Tensor  # (N, C) logits
    scores: Tensor  # (N, C) Gumbel-sigmoid values
    masks: Tensor  # (N, C) straight-through binary masks
    e_tea: Tensor  # (C, Q)
    e_stu: Tensor
    logits_tea: Tensor  # (C,)
    logits_stu: Tensor
    retention: Tensor  # scalar
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def project(model: Dmin, feats) -> Tensor:
    feats = T.as_tensor(feats)
    if feats.ndim != 2 or feats.shape[1] != model["proj.w"].shape[0]:
        raise ValueError(f"project: features {feats.shape} do not match D={model['proj.w'].shape[0]}")
    return T.relu(feats @ model["proj.w"] + model["proj.b"])


def gated_attention(model: Dmin, f: Tensor) -> Tensor:
    gate = T.tanh(f @ model["att.V"]) * T.sigmoid(f @ model["att.U"])
    return gate @ model["att.W"]


def teacher_aggregate(f: Tensor, a: Tensor) -> Tensor:
    """(C, Q): row c is softmax(A[:, c])^T F."""
    return T.softmax(a, axis=0).T @ f


def gumbel(shape, rng) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_sigmoid(a, tau: float, g1, g2) -> Tensor:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return T.sigmoid(T.scale(a + (np.asarray(g1) - np.asarray(g2)), 1.0 / tau))


def straight_through_binarize(scores, gamma: float) -> Tensor:
    return T.straight_through(scores, gamma)


def student_aggregate(f: Tensor, a: Tensor, m) -> tuple:
    """Masked-softmax pooling; returns ((C, Q) representation, degenerate-column flags).

    Weights are exp(A) * M normalized over the kept set with a 1e-12 guard
    in the denominator; a column with no kept instance pools to zero.
    """
    m = T.as_tensor(m)
    a_const = T.detach(a).data
    kept = m.data > 0
    degenerate = ~kept.any(axis=0)
    shift = np.where(kept, a_const, -np.inf).max(axis=0)
    shift = np.where(degenerate, 0.0, shift)
    w = T.exp(a - shift) * m
    weights = w / (w.sum(axis=0) + MASK_EPS)
    return weights.T @ f, degenerate


def classify(model: Dmin, e: Tensor) -> Tensor:
    return cka_logits(e, model["cka.coef"])


def relevance_union(m) -> Tensor:
    """Per-instance indicator that any class mask is on: 1 - prod_c (1 - M_c)."""
    m = T.as_tensor(m)
    off = 1.0 - m[:, 0]
    for c in range(1, m.shape[1]):
        off = off * (1.0 - m[:, c])
    return 1.0 - off


def retention(m) -> Tensor:
    return T.mean(relevance_union(m))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    return -T.log_softmax(logits)[label]


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """KL(softmax(p) || softmax(q))."""
    lp = T.log_softmax(p_logits)
    lq = T.log_softmax(q_logits)
    return (T.exp(lp) * (lp - lq)).sum()


def clustering_loss(model: Dmin, f: Tensor, a: Tensor, label: int) -> Tensor:
    """Instance clustering on the ground-truth class.

    The ``k_clu`` highest-attention instances of column ``label`` are
    pseudo-labelled 1 and the ``k_clu`` lowest 0; the class's two-way head
    scores them and the mean cross-entropy is returned. Selection uses
    attention values only, so it carries no gradient.
    """
    n = f.shape[0]
    k = min(model.cfg.k_clu, n // 2)
    if k == 0:
        return Tensor(0.0)
    col = T.detach(a).data[:, label]
    order = np.argsort(-col, kind="stable")
    idx = np.concatenate([order[:k], order[-k:]])
    targets = np.array([1] * k + [0] * k)
    logits = f[idx] @ model["clu.w"][label] + model["clu.b"][label]
    logp = T.log_softmax(logits, axis=1)
    return -T.mean(logp[np.arange(2 * k), targets])


# ---------------------------------------------------------------------------
# forward passes and losses
# ---------------------------------------------------------------------------

def sd_forward(model: Dmin, feats, rng=None, noise=None) -> tuple:
    """Teacher and student paths on one bag.

    With ``noise`` given as a pair (G1, G2) or ``rng`` set, the student masks
    use Gumbel-sigmoid scores; with neither, the deterministic evaluation
    masks B(sigmoid(A / tau), gamma) are used. Returns (output, projected F).
    """
    cfg = model.cfg
    f = project(model, feats)
    a = gated_attention(model, f)
    e_tea = teacher_aggregate(f, a)
    logits_tea = classify(model, e_tea)
    if noise is None and rng is not None:
        noise = (gumbel(a.shape, rng), gumbel(a.shape, rng))
    if noise is not None:
        scores = gumbel_sigmoid(a, cfg.tau, noise[0], noise[1])
    else:
        scores = T.sigmoid(T.scale(a, 1.0 / cfg.tau))
    m = straight_through_binarize(scores, cfg.gamma)
    e_stu, degenerate = student_aggregate(f, a, m)
    logits_stu = classify(model, e_stu)
    out = SdForwardOutput(a, scores, m, e_tea, e_stu, logits_tea, logits_stu, retention(m), degenerate)
    return out, f


def sd_loss_terms(model: Dmin, out: SdForwardOutput, f: Tensor, label: int) -> dict:
    cfg = model.cfg
    diff = out.e_stu - T.detach(out.e_tea)
    return {
        "cls": cross_entropy(out.logits_tea, label),
        "clu": clustering_loss(model, f, out.attention, label),
        "dis1": T.mean(diff * diff),
        "dis2": kl_divergence(out.logits_stu, T.detach(out.logits_tea)),
        "rate": (out.retention - cfg.r) ** 2,
    }


def loss_sd(model: Dmin, feats, label: int, rng=None, noise=None):
    """Weighted self-distillation objective. Returns (loss, output, terms)."""
    out, f = sd_forward(model, feats, rng=rng, noise=noise)
    terms = sd_loss_terms(model, out, f, label)
    loss = None
    for alpha, term in zip(model.cfg.alphas, terms.values()):
        loss = T.scale(term, alpha) if loss is None else loss + T.scale(term, alpha)
    return loss, out, terms


def deterministic_masks(model: Dmin, attention) -> np.ndarray:
    a = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    return T.binarize(T._sigmoid(a / model.cfg.tau), model.cfg.gamma)


def teacher_logits(model: Dmin, feats) -> Tensor:
    f = project(model, feats)
    return classify(model, teacher_aggregate(f, gated_attention(model, f)))


def student_logits(model: Dmin, feats, mask=None) -> Tensor:
    """Student path over ``feats`` with an explicit mask (all ones by default)."""
    f = project(model, feats)
    a = gated_attention(model, f)
    m = np.ones(a.shape) if mask is None else mask
    e, _ = student_aggregate(f, a, m)
    return classify(model, e)
