"""Named parameter store with seeded initialization and checkpoint I/O."""

from __future__ import annotations

import numpy as np

from .. import fileio
from ..rng import Stream
from .tensor import Tensor

INIT_STD = 0.02


class ParamStore:
    """Registry of named parameters.

    Initialization of each parameter is derived from ``(seed, name)`` alone,
    so a store rebuilt with the same seed is bit-identical regardless of
    registration order. The trainable flag doubles as the autodiff
    ``requires_grad`` marker: frozen parameters can never accumulate grads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape, init="trunc_normal", trainable: bool = True,
            std: float = INIT_STD) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        stream = Stream(self.seed).child(f"param/{name}")
        if isinstance(init, np.ndarray):
            data = np.array(init, dtype=np.float64).reshape(shape)
        elif init == "trunc_normal":
            data = stream.truncated_normal(shape, std=std)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif isinstance(init, tuple) and init[0] == "const":
            data = np.full(shape, float(init[1]))
        else:
            raise ValueError(f"unknown init '{init}'")
        t = Tensor(data, requires_grad=trainable)
        self._params[name] = t
        return t

    def get(self, name: str) -> Tensor:
        if name not in self._params:
            raise KeyError(f"unknown parameter '{name}'")
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._params[n].requires_grad]

    def set_trainable(self, predicate) -> None:
        """Set requires_grad per parameter name; clears stale grads."""
        for name, t in self._params.items():
            t.requires_grad = bool(predicate(name))
            t.grad = None

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter name; zeros where nothing accumulated."""
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self._params.items()
        }

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite parameter values in place; existing Tensor refs stay valid."""
        for name, arr in state.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"checkpoint has unknown parameter '{name}'")
                continue
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': store {t.data.shape}, "
                    f"checkpoint {arr.shape}"
                )
            t.data = np.array(arr, dtype=np.float64)
        if strict:
            missing = [n for n in self._params if n not in state]
            if missing:
                raise KeyError(f"checkpoint missing parameters: {missing[:4]}...")

    def save(self, path) -> None:
        fileio.write_tensors(path, {n: t.data for n, t in self._params.items()})

    def load(self, path, strict: bool = True) -> None:
        self.load_state(fileio.read_tensors(path), strict=strict)

    def clone_state(self) -> dict[str, np.ndarray]:
        return self.state()
