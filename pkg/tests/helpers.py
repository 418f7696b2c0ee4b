"""Shared fixtures-as-functions: parameter extraction for the oracles."""

import numpy as np

from tfk.core import Rng, Tensor
from tfk.verify import randomise


def proj_dict(params):
    """Projection arrays of an ``AttentionParams`` in the oracle's naming."""
    return {
        "wq": params.q.weight.data, "bq": params.q.bias.data,
        "wk": params.k.weight.data, "bk": params.k.bias.data,
        "wv": params.v.weight.data, "bv": params.v.bias.data,
        "wo": params.proj.weight.data, "bo": params.proj.bias.data,
    }


def ln_pair(norm):
    return norm.weight.data, norm.bias.data


def mlp_tuple(mlp):
    return mlp.fc1.weight.data, mlp.fc1.bias.data, mlp.fc2.weight.data, mlp.fc2.bias.data


def branch_dict(branch):
    a = branch.attn
    return {
        "attn": proj_dict(a), "t_self": a.bias_self.data, "t_other": a.bias_other.data,
        "ln_own": ln_pair(a.norm_own), "ln_other": ln_pair(a.norm_other),
        "ln": ln_pair(branch.norm), "mlp": mlp_tuple(branch.mlp),
    }


def random_module(module, seed):
    return randomise(module, Rng(seed).split("params"))


def set_identity(params):
    """Identity projections with zero biases and zero position bias."""
    params.initialise(Rng(0))
    for lin in (params.q, params.k, params.v, params.proj):
        lin.weight.data = np.eye(params.dim)
        lin.bias.data = np.zeros(params.dim)
    for name in ("bias_self", "bias_other"):
        if hasattr(params, name):
            getattr(params, name).data[:] = 0.0
    return params


def tensor(rng, *shape):
    return Tensor(rng.normal(size=shape))
