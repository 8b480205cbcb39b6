"""Parameter store and the few layer shapes the networks are built from."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Params:
    """Ordered mapping of parameter name to leaf tensor."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.tensors: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def dense(self, name: str, n_in: int, n_out: int, gain: float = 2.0, bias: bool = True):
        self.add(f"{name}.w", self.rng.standard_normal((n_in, n_out)) * np.sqrt(gain / n_in))
        if bias:
            self.add(f"{name}.b", np.zeros(n_out))

    def mlp(self, name: str, widths: Iterable[int], last_gain: float = 2.0):
        """Dense layers ``widths[0] -> ... -> widths[-1]``; ``last_gain=0`` zero-inits the last."""
        widths = list(widths)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.dense(f"{name}.{i}", a, b, gain=last_gain if i == len(widths) - 2 else 2.0)

    def list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def arrays(self, prefix: str = "param/") -> dict[str, np.ndarray]:
        return {prefix + k: v.data.copy() for k, v in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "param/") -> None:
        missing = [k for k in self.tensors if prefix + k not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for k, t in self.tensors.items():
            arr = arrays[prefix + k]
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=np.float32)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def dense(x: Tensor, params: Params, name: str) -> Tensor:
    y = nx.matmul(x, params[f"{name}.w"])
    b = f"{name}.b"
    return nx.add(y, params[b]) if b in params else y


def mlp(x: Tensor, params: Params, name: str, final_relu: bool = True) -> Tensor:
    i = 0
    while f"{name}.{i}.w" in params:
        x = dense(x, params, f"{name}.{i}")
        if f"{name}.{i + 1}.w" in params or final_relu:
            x = nx.relu(x)
        i += 1
    if i == 0:
        raise KeyError(f"no layers named {name!r}")
    return x


def mlp_out_width(params: Params, name: str) -> int:
    i = 0
    while f"{name}.{i + 1}.w" in params:
        i += 1
    return params[f"{name}.{i}.w"].shape[1]
