"""Gradient-check suite over every differentiable module, in 64-bit precision.

Each row builds a small instance, draws parameters at an O(1) scale (so
finite differences are not swamped by roundoff), and compares tape
gradients with central differences on the inputs and on a sample of
parameter coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionParams, CrossAttentionParams, TokenGrid, mca, wmca, wsa
from .core.gradcheck import grad_check
from .core.nn import Module
from .core.rng import Rng
from .core.tensor import Tensor, precision
from .fusion import HmtBlock, MetaMLP, MtpBlock
from .model import ClassificationLayer, TFormerConfig, TFormer, multi_label_loss
from .schema import DERM7PT

TOLERANCE = 1e-4

# Key-projection biases add the same logit to every key of a query row, so
# softmax cancels them and their exact gradient is zero: a relative check
# there only measures roundoff.
ZERO_GRAD_SUFFIX = ("k", "bias")


@dataclass
class GradRow:
    name: str
    max_rel_error: float
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def randomise(module: Module, rng: Rng) -> Module:
    """Parameters at unit-activation scale: weights ``N(0, 1/fan_in)``, others ``O(0.1)``."""
    for name, p in module.named_parameters():
        r = rng.split(name)
        if p.ndim == 2 and not name.endswith(("bias_self", "bias_other")):
            p.data = r.normal(0.0, 1.0 / np.sqrt(p.shape[0]), p.shape)
        elif p.ndim == 1 and name.endswith("weight"):
            p.data = 1.0 + r.normal(0.0, 0.1, p.shape)
        else:
            p.data = r.normal(0.0, 0.3, p.shape)
    return module


def checked_params(module: Module, prefix: str = "") -> list:
    return [p for n, p in module.named_parameters(prefix) if tuple(n.split(".")[-2:]) != ZERO_GRAD_SUFFIX]


def _weighted_sum(out: Tensor, rng: Rng) -> Callable[[Tensor], Tensor]:
    """Fixed random projection of an output to a scalar."""
    r = Tensor(rng.normal(0.0, 1.0, out.shape))
    return lambda y: (y * r).sum()


def _check(f: Callable[[], Tensor], inputs: list[Tensor], params: list, rng: Rng,
           input_coords: int | None, param_coords: int | None, eps: float) -> float:
    worst = grad_check(f, inputs, eps=eps, max_coords=input_coords, rng=rng.split("in"))
    if params:
        worst = max(worst, grad_check(f, params, eps=eps, max_coords=param_coords, rng=rng.split("par")))
    return worst


def _row(name: str, build, seed: int, eps: float) -> GradRow:
    t0 = time.perf_counter()
    with precision("float64"):
        f, inputs, params, ic, pc = build(Rng(seed).split(name))
        err = _check(f, inputs, params, Rng(seed).split(name).split("coords"), ic, pc, eps)
    return GradRow(name, err, time.perf_counter() - t0)


def _scalarise(rng: Rng, forward: Callable[[], Tensor]) -> Callable[[], Tensor]:
    proj = _weighted_sum(forward(), rng.split("proj"))
    return lambda: proj(forward())


def _build_wsa(rng: Rng):
    m, c = 2, 8
    params = randomise(AttentionParams(c, 2, m, bias_tables=1), rng.split("p"))
    x = Tensor(rng.normal(0.0, 1.0, (3, m * m, c)))
    f = _scalarise(rng, lambda: wsa(x, x, x, params))
    return f, [x], checked_params(params), None, 60


def _build_wmca(rng: Rng):
    m, c = 2, 8
    params = randomise(CrossAttentionParams(c, 2, m), rng.split("p"))
    own = Tensor(rng.normal(0.0, 1.0, (3, m * m, c)))
    other = Tensor(rng.normal(0.0, 1.0, (3, m * m, c)))
    f = _scalarise(rng, lambda: wmca(own, other, params))
    return f, [own, other], checked_params(params), None, 60


def _build_mca(rng: Rng):
    c = 8
    params = randomise(AttentionParams(c, 2), rng.split("p"))
    q = Tensor(rng.normal(0.0, 1.0, (2, 1, c)))
    kv = Tensor(rng.normal(0.0, 1.0, (2, 3, c)))
    f = _scalarise(rng, lambda: mca(q, kv, params))
    return f, [q, kv], checked_params(params), None, 60


def _build_hmt(rng: Rng):
    c = 8
    block = randomise(HmtBlock(c, 2, (2, 4), window=2), rng.split("p"))
    der = Tensor(rng.normal(0.0, 1.0, (1, 2, 4, c)))
    cli = Tensor(rng.normal(0.0, 1.0, (1, 2, 4, c)))

    def fwd():
        d, k = block(TokenGrid(der), TokenGrid(cli))
        return d.tokens + k.tokens * 0.5

    return _scalarise(rng, fwd), [der, cli], checked_params(block), None, 80


def _build_mtp(rng: Rng):
    d = 8
    block = randomise(MtpBlock(d, 2), rng.split("p"))
    xs = [Tensor(rng.normal(0.0, 1.0, (2, d))) for _ in range(3)]
    f = _scalarise(rng, lambda: block(xs[0], [xs[1], xs[2]])[0])
    return f, xs, checked_params(block), None, 60


def _build_meta_mlp(rng: Rng):
    mlp = randomise(MetaMLP(20, 8), rng.split("p"))
    x = Tensor((rng.random((2, 20)) < 0.3).astype(np.float64))
    f = _scalarise(rng, lambda: mlp(x))
    return f, [x], checked_params(mlp), None, 60


def _build_classifier(rng: Rng):
    layer = randomise(ClassificationLayer(16, DERM7PT, 8), rng.split("p"))
    x = Tensor(rng.normal(0.0, 1.0, (3, 16)))
    y = np.stack([rng.integers(0, k, size=3) for k in DERM7PT.class_counts], axis=1)
    f = lambda: multi_label_loss(layer(x), y)  # noqa: E731
    return f, [x], checked_params(layer), None, 60


def toy_model(config: TFormerConfig | None = None, rng: Rng | None = None) -> TFormer:
    rng = rng or Rng(0)
    return randomise(TFormer(config or TFormerConfig()), rng)


def _build_end_to_end(rng: Rng, config: TFormerConfig | None = None):
    config = config or TFormerConfig()
    model = toy_model(config, rng.split("p"))
    h, w = config.backbone.image_size
    derm = Tensor(rng.random((1, h, w, 3)))
    cli = Tensor(rng.random((1, h, w, 3)))
    meta = Tensor((rng.random((1, config.meta_dim)) < 0.3).astype(np.float64))
    y = np.stack([rng.integers(0, k, size=1) for k in config.schema.class_counts], axis=1)
    f = lambda: multi_label_loss(model(derm, cli, meta)[0], y)  # noqa: E731
    return f, [derm, cli, meta], checked_params(model), 24, 24


SUITE = {
    "wsa": _build_wsa,
    "wmca": _build_wmca,
    "mca": _build_mca,
    "hmt_block": _build_hmt,
    "mtp_block": _build_mtp,
    "meta_mlp": _build_meta_mlp,
    "classification_layer": _build_classifier,
    "end_to_end_loss": _build_end_to_end,
}


def gradient_suite(seed: int = 0, eps: float = 1e-5, names=None, config: TFormerConfig | None = None) -> list[GradRow]:
    """Run the suite; ``config`` replaces the toy config of the end-to-end row."""
    rows = []
    for name in names or SUITE:
        build = SUITE[name]
        if name == "end_to_end_loss" and config is not None:
            rows.append(_row(name, lambda r: _build_end_to_end(r, config), seed, eps))
        else:
            rows.append(_row(name, build, seed, eps))
    return rows


def format_table(rows: list[GradRow]) -> str:
    lines = ["module,max_rel_error,status,seconds"]
    for r in rows:
        lines.append(f"{r.name},{r.max_rel_error:.3e},{'pass' if r.passed else 'FAIL'},{r.seconds:.2f}")
    return "\n".join(lines)


__all__ = ["GradRow", "SUITE", "TOLERANCE", "format_table", "gradient_suite", "randomise", "toy_model"]
