"""First-order optimizers over name -> ndarray parameter maps (updated in place)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam step, applied to ``param`` and ``state`` in place."""
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    def step(self, params, grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            adam_update(p.data, grads[name], st, self.lr, self.betas, self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"optim.m/{name}"] = st.m
            out[f"optim.v/{name}"] = st.v
        return out

    def step_count(self) -> int:
        return max((st.t for st in self.state.values()), default=0)

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for key, arr in tensors.items():
            if key.startswith("optim.m/"):
                name = key[len("optim.m/"):]
                self.state[name] = AdamState(arr.copy(), tensors[f"optim.v/{name}"].copy(), t)


class SGD:
    def __init__(self, lr: float = 1e-4):
        self.lr = lr

    def step(self, params, grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p.data -= self.lr * grads[name]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def step_count(self) -> int:
        return 0

    def load_state(self, tensors, t) -> None:
        pass
