"""Parameter grouping and the AdamW optimizer.

Groups carry their own learning rate so the encoder and adapter stacks can be
stepped at different rates while the frozen language model receives none.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParameterGroup:
    """Named set of parameters sharing a learning rate and a freeze flag."""

    name: str
    tensors: dict[str, Tensor]
    learning_rate: float
    frozen: bool = field(default=False)

    def __post_init__(self):
        for pname, t in self.tensors.items():
            if self.frozen and t.requires_grad:
                raise ValueError(f"frozen group {self.name!r} holds trainable {pname!r}")
            if not self.frozen and not t.requires_grad:
                raise ValueError(f"trainable group {self.name!r} holds frozen {pname!r}")


def trainable_params(groups: list[ParameterGroup]) -> list[Tensor]:
    out = []
    for g in groups:
        if not g.frozen:
            out.extend(g.tensors.values())
    return out


def clip_grad_norm(groups: list[ParameterGroup], max_norm: float) -> float:
    """Scale all trainable grads so their global L2 norm is <= max_norm."""
    sq = 0.0
    grads = []
    for g in groups:
        if g.frozen:
            continue
        for t in g.tensors.values():
            if t.grad is not None:
                sq += float(np.sum(t.grad * t.grad))
                grads.append(t)
    norm = float(np.sqrt(sq))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in grads:
            t.grad = t.grad * scale
    return norm


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    One (m, v) slot per parameter, keyed by group and parameter name so
    optimizer state survives checkpoint round-trips deterministically.
    Frozen groups are never touched.
    """

    def __init__(
        self,
        groups: list[ParameterGroup],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        for g in groups:
            if g.frozen:
                continue
            for pname, t in g.tensors.items():
                key = f"{g.name}/{pname}"
                self._m[key] = np.zeros_like(t.data)
                self._v[key] = np.zeros_like(t.data)

    def step(self) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for g in self.groups:
            if g.frozen:
                continue
            lr = g.learning_rate
            for pname, p in g.tensors.items():
                if p.grad is None:
                    raise ValueError(f"missing gradient for {g.name}/{pname}")
                key = f"{g.name}/{pname}"
                m = self._m[key]
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * (p.grad * p.grad)
                m_hat = m / bc1
                v_hat = v / bc2
                p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.tensors.values():
                p.grad = None
