"""Named parameter registry shared by the backbone, prompt modules and head."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, tensor


class ParamRegistry:
    """Ordered name -> Tensor map with freeze control and byte snapshots.

    Names are stable dotted paths (e.g. ``backbone.layer3.attn.qkv.w``) so
    checkpoints from independent runs line up tensor by tensor.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = tensor(np.asarray(array, dtype=self.dtype), requires_grad=trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if n.startswith(prefix)}

    def count(self, prefix: str = "") -> int:
        return sum(t.value.size for n, t in self._params.items()
                   if n.startswith(prefix))

    def set_trainable(self, predicate) -> None:
        """Set requires_grad from a name predicate; frozen tensors drop grads."""
        for n, t in self._params.items():
            on = bool(predicate(n))
            t.requires_grad = on
            if not on:
                t.grad = None

    def trainable_items(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if t.requires_grad}

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self, names=None) -> dict[str, bytes]:
        sel = self._params if names is None else {n: self._params[n] for n in names}
        return {n: t.value.tobytes() for n, t in sel.items()}

    def changed_since(self, snap: dict[str, bytes]) -> list[str]:
        return [n for n, raw in snap.items() if self._params[n].value.tobytes() != raw]

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, arr in values.items():
            if n not in self._params:
                raise KeyError(f"unknown parameter: {n}")
            cur = self._params[n]
            if tuple(arr.shape) != cur.value.shape:
                raise ValueError(
                    f"shape mismatch for {n}: checkpoint {tuple(arr.shape)} "
                    f"vs model {cur.value.shape}")
            cur.value = np.ascontiguousarray(np.asarray(arr, dtype=cur.value.dtype))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(reg: ParamRegistry, rng: np.random.Generator, name: str,
               d_in: int, d_out: int) -> None:
    reg.add(f"{name}.w", uniform_init(rng, d_in, (d_in, d_out)))
    reg.add(f"{name}.b", np.zeros(d_out))


def add_layernorm(reg: ParamRegistry, name: str, dim: int) -> None:
    reg.add(f"{name}.g", np.ones(dim))
    reg.add(f"{name}.b", np.zeros(dim))
