"""Small layer library over the autodiff core, with a flat named parameter store."""

from __future__ import annotations

import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, container

INIT_STD = 0.02

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "elu": ad.elu,
}


def _activate(x: Tensor, act: str | None) -> Tensor:
    return x if act is None else ACTIVATIONS[act](x)


class ParamStore:
    """Ordered name -> trainable tensor mapping; initialisation draws from one seeded stream."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = ad.tensor(value.astype(ad.get_default_dtype()), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def truncated_normal(self, name: str, shape, std: float = INIT_STD) -> Tensor:
        draw = self.rng.standard_normal(shape)
        bad = np.abs(draw) > 2
        while bad.any():
            draw[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(draw) > 2
        return self._add(name, draw * std)

    def constant(self, name: str, shape, value: float = 0.0) -> Tensor:
        return self._add(name, np.full(shape, value))

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"checkpoint tensor {k} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data = v.astype(self.params[k].dtype)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, v in self.params.items():
            container.save(directory / f"{k}.o3vt", v.data)

    def load(self, directory) -> None:
        directory = Path(directory)
        missing = [k for k in self.params if not (directory / f"{k}.o3vt").exists()]
        if missing:
            raise ValueError(f"checkpoint {directory} lacks {len(missing)} tensors, e.g. {missing[:3]}")
        self.load_state({k: container.load(directory / f"{k}.o3vt") for k in self.params})


class Layer:
    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, act: str | None = None, zero: bool = False):
        self.w = store.constant(f"{name}.w", (n_in, n_out)) if zero else store.truncated_normal(f"{name}.w", (n_in, n_out))
        self.b = store.constant(f"{name}.b", (n_out,))
        self.act = act
        self.n_out = n_out

    def __call__(self, x: Tensor) -> Tensor:
        return _activate(ad.matmul(x, self.w) + self.b, self.act)


class Conv(Layer):
    """2-D or 3-D convolution (rank chosen by the kernel size tuple)."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        kernel: Sequence[int],
        c_in: int,
        c_out: int,
        act: str | None = None,
        stride=1,
        padding: str = "same",
        zero: bool = False,
    ):
        shape = tuple(kernel) + (c_in, c_out)
        self.w = store.constant(f"{name}.w", shape) if zero else store.truncated_normal(f"{name}.w", shape)
        self.b = store.constant(f"{name}.b", (c_out,))
        self.act, self.stride, self.padding = act, stride, padding
        self.fn = ad.conv2d if len(kernel) == 2 else ad.conv3d
        self.n_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        return _activate(self.fn(x, self.w, self.b, stride=self.stride, padding=self.padding), self.act)


class LayerNorm(Layer):
    def __init__(self, store: ParamStore, name: str, n: int):
        self.gamma = store.constant(f"{name}.gamma", (n,), 1.0)
        self.beta = store.constant(f"{name}.beta", (n,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class GroupNorm(Layer):
    def __init__(self, store: ParamStore, name: str, groups: int, n: int):
        self.groups = math.gcd(groups, n)
        self.gamma = store.constant(f"{name}.gamma", (n,), 1.0)
        self.beta = store.constant(f"{name}.beta", (n,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.gamma, self.beta)


class Residual(Layer):
    def __init__(self, inner: Layer):
        self.inner = inner

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.inner(x)


class Fn(Layer):
    """Wraps a parameter-free function such as reshape or upsampling."""

    def __init__(self, fn: Callable[[Tensor], Tensor]):
        self.fn = fn

    def __call__(self, x: Tensor) -> Tensor:
        return self.fn(x)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
