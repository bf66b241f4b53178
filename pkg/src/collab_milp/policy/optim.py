"""Adam with per-tensor learning rates, gradient-norm clipping, and checkpointable state."""

from __future__ import annotations

import math
from pathlib import Path

import torch

from .params import ParamSet, ParamFormatError, dump_tensors, parse_tensors


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients jointly so their global 2-norm is at most ``max_norm``."""
    grads = [t.grad for t in params.tensors.values() if t.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


class Adam:
    def __init__(self, params: ParamSet, lr: float | dict = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.set_lr(lr)
        self.step_count = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.tensors.items()}

    def set_lr(self, lr: float | dict) -> None:
        """A float, or a mapping from tensor name to learning rate."""
        names = self.params.names()
        if isinstance(lr, dict):
            self.lr = {k: float(lr[k]) for k in names}
        else:
            self.lr = {k: float(lr) for k in names}

    def step(self, grads: dict | None = None) -> None:
        """One update from ``grads`` (name -> tensor) or from each tensor's ``.grad``."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        with torch.no_grad():
            for name, p in self.params.tensors.items():
                g = grads.get(name) if grads is not None else p.grad
                if g is None:
                    g = torch.zeros_like(p)
                m = self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v = self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
                p.sub_(self.lr[name] * update)

    # state files share the parameter container format
    def to_bytes(self) -> bytes:
        tensors = {}
        for k in self.params.names():
            tensors["m." + k] = self.m[k]
            tensors["v." + k] = self.v[k]
        desc = {"kind": "adam", "step": self.step_count, "betas": [self.beta1, self.beta2],
                "eps": self.eps, "lr": self.lr}
        return dump_tensors(desc, tensors)

    def load_bytes(self, blob: bytes) -> None:
        desc, arrays = parse_tensors(blob)
        if desc.get("kind") != "adam":
            raise ParamFormatError("not an optimizer state file")
        self.step_count = int(desc["step"])
        self.beta1, self.beta2 = desc["betas"]
        self.eps = desc["eps"]
        self.lr = {k: float(v) for k, v in desc["lr"].items()}
        for k in self.params.names():
            self.m[k] = torch.from_numpy(arrays["m." + k].copy())
            self.v[k] = torch.from_numpy(arrays["v." + k].copy())

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    def load(self, path) -> None:
        self.load_bytes(Path(path).read_bytes())


def sgd_adam_step(opt: Adam, grads: dict | None = None) -> None:
    opt.step(grads)
