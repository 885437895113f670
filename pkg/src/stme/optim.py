"""Adam optimizer over named parameter lists, with a serializable state."""

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 2e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= np.asarray(self.lr * update, dtype=p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed for checkpointing."""
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int):
        self.t = int(t)
        for name in self.m:
            self.m[name] = np.ascontiguousarray(tensors[f"opt.m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.ascontiguousarray(tensors[f"opt.v.{name}"], dtype=self.v[name].dtype)
