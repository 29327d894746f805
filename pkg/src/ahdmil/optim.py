from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to the arrays in ``params``.

    ``params`` and ``grads`` map names to arrays of matching shape. A
    non-finite gradient raises ``FloatingPointError`` before anything is
    modified.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(sorted(bad))}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a dict of named leaf tensors."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }
        adam_step({name: p.data for name, p in self.params.items()}, grads, self.state)

    def export(self) -> dict:
        """Flat array dict (moments plus step) for checkpointing."""
        out = {"step": np.array([float(self.state.step)])}
        for name in self.params:
            if name in self.state.m:
                out[f"m.{name}"] = self.state.m[name]
                out[f"v.{name}"] = self.state.v[name]
        return out

    def load(self, arrays: dict):
        self.state.step = int(arrays["step"][0])
        for name in self.params:
            if f"m.{name}" in arrays:
                self.state.m[name] = np.array(arrays[f"m.{name}"])
                self.state.v[name] = np.array(arrays[f"v.{name}"])

