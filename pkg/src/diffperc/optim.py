"""AdamW with learning-rate groups, plus the poly-with-warmup schedule."""

import numpy as np

from .errors import ConfigError


class AdamW:
    """Decoupled weight decay Adam over named parameter groups.

    Each group carries an ``lr_scale`` so the backbone can train at a fixed
    fraction of the base learning rate while everything else uses 1.0.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        seen = set()
        for group in groups:
            for p in group["params"]:
                if not p.requires_grad:
                    raise ConfigError("AdamW: frozen parameter placed in an LR group")
                if id(p) in seen:
                    raise ConfigError("AdamW: parameter assigned to two LR groups")
                seen.add(id(p))
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._state = {}
        for group in groups:
            for p in group["params"]:
                self._state[id(p)] = (
                    np.zeros_like(p.data),
                    np.zeros_like(p.data),
                )

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"]:
                p.grad = None

    def step(self, base_lr):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        # mhat/(sqrt(vhat)+eps) == scale * m / (sqrt(v) + eps*sqrt(bc2))
        scale = np.float32(np.sqrt(bc2) / bc1)
        eps_t = np.float32(self.eps * np.sqrt(bc2))
        for group in self.groups:
            lr = np.float32(base_lr * group.get("lr_scale", 1.0))
            decay = np.float32(1.0 - lr * self.weight_decay)
            for p in group["params"]:
                if p.grad is None:
                    continue
                m, v = self._state[id(p)]
                g = p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                denom = np.sqrt(v)
                denom += eps_t
                p.data *= decay
                p.data -= (lr * scale) * (m / denom)

    def state_arrays(self):
        """Flat view of optimizer moments for checkpointing, keyed by group/index."""
        out = {}
        for gi, group in enumerate(self.groups):
            for pi, p in enumerate(group["params"]):
                m, v = self._state[id(p)]
                out[f"opt.g{gi}.p{pi}.m"] = m
                out[f"opt.g{gi}.p{pi}.v"] = v
        return out

    def load_state_arrays(self, arrays, step):
        self.t = int(step)
        for gi, group in enumerate(self.groups):
            for pi, p in enumerate(group["params"]):
                m, v = self._state[id(p)]
                m[...] = arrays[f"opt.g{gi}.p{pi}.m"]
                v[...] = arrays[f"opt.g{gi}.p{pi}.v"]


def poly_lr(step, total_iters, base_lr, power=0.9, min_lr=1e-6, warmup_iters=0):
    """Linear warmup followed by polynomial decay toward ``min_lr``."""
    if warmup_iters > 0 and step < warmup_iters:
        return base_lr * (step + 1) / warmup_iters
    span = max(total_iters - warmup_iters, 1)
    progress = min((step - warmup_iters) / span, 1.0)
    return max(min_lr, (base_lr - min_lr) * (1.0 - progress) ** power + min_lr)


def default_warmup(total_iters):
    """Warmup length scaled to the iteration budget (150 per 8000 iters)."""
    return max(1, round(total_iters * 150 / 8000))
