"""Parameters, module containers and the primitive layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class InitSpec:
    kind: str  # "trunc_normal" | "zeros" | "ones"
    std: float = 0.02


TRUNC_NORMAL = InitSpec("trunc_normal", 0.02)
ZEROS = InitSpec("zeros")
ONES = InitSpec("ones")


class Parameter(Tensor):
    """A trainable leaf tensor that remembers how it was initialised."""

    __slots__ = ("init_spec",)

    def __init__(self, shape, init: InitSpec = TRUNC_NORMAL):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init_spec = init

    def initialise(self, rng: Rng) -> None:
        if self.init_spec.kind == "trunc_normal":
            values = rng.truncated_normal(self.shape, std=self.init_spec.std)
        elif self.init_spec.kind == "zeros":
            values = np.zeros(self.shape)
        elif self.init_spec.kind == "ones":
            values = np.ones(self.shape)
        else:
            raise ValueError(f"unknown init kind {self.init_spec.kind!r}")
        self.data = np.ascontiguousarray(values, dtype=self.dtype)


class Module:
    """Attribute-walking container in the usual deep-learning style.

    Parameters are discovered through attributes holding ``Parameter``,
    ``Module`` or lists of modules. A module reachable along several paths
    (weight sharing) reports its parameters once, under the first path.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name, seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def initialise(self, rng: Rng) -> "Module":
        """Draw every parameter from a stream keyed by its name."""
        for name, p in self.named_parameters():
            p.initialise(rng.split(name))
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter((d_in, d_out), TRUNC_NORMAL)
        self.bias = Parameter((d_out,), ZEROS) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Parameter((d,), ONES)
        self.bias = Parameter((d,), ZEROS)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with GELU between; hidden width ``round(d * hidden_ratio)``."""

    def __init__(self, d: int, hidden_ratio: float = 4.0, d_out: int | None = None):
        if hidden_ratio <= 0:
            raise ValueError(f"hidden_ratio must be positive, got {hidden_ratio}")
        hidden = max(1, int(round(d * hidden_ratio)))
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d if d_out is None else d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def mlp_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Functional form of :class:`MLP`."""
    return F.linear(F.gelu(F.linear(x, w1, b1)), w2, b2)


def zeros_like_params(module: Module) -> None:
    """Set every parameter of ``module`` to zero (used by residual-contract tests)."""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
