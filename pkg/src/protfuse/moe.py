"""Soft mixture-of-experts encoder producing per-protein condition embeddings.

Parameters live in a plain dict of :class:`~protfuse.numerics.Var` keyed
``moe.*`` so they can be merged with other modules' parameters, optimised
together and checkpointed with :func:`~protfuse.numerics.save_params`.
Functions return ``Var``; take ``.value`` for the array.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .numerics import ad

__all__ = ["init_moe", "gate_probs", "moe_encode", "expert_outputs", "moe_dims"]


def init_moe(d_in, d_h=64, n_experts=4, rng=None) -> dict:
    """Zero gate (uniform routing) and fan-in scaled Gaussian experts."""
    if n_experts < 1 or d_in < 1 or d_h < 1:
        raise ContractViolation("MoE needs positive input width, output width and expert count")
    rng = np.random.default_rng(rng)
    return {
        "moe.gate_w": ad.param(np.zeros((d_in, n_experts)), "moe.gate_w"),
        "moe.gate_b": ad.param(np.zeros(n_experts), "moe.gate_b"),
        "moe.expert_w": ad.param(rng.normal(size=(n_experts, d_in, d_h)) / np.sqrt(d_in), "moe.expert_w"),
        "moe.expert_b": ad.param(np.zeros((n_experts, d_h)), "moe.expert_b"),
    }


def moe_dims(params) -> tuple[int, int, int]:
    """``(d_in, d_h, n_experts)``."""
    k, d_in, d_h = ad.const(params["moe.expert_w"]).shape
    return d_in, d_h, k


def _rows(params, h):
    h = ad.const(h)
    d_in = moe_dims(params)[0]
    if h.value.ndim not in (1, 2) or h.shape[-1] != d_in:
        raise ContractViolation(f"MoE input must have {d_in} features, got shape {h.shape}")
    return h if h.value.ndim == 2 else ad.reshape(h, (1, d_in)), h.value.ndim == 1


def gate_probs(params, h):
    """Softmax routing weights, one row per input row."""
    rows, single = _rows(params, h)
    g = ad.softmax(ad.einsum("pi,ik->pk", rows, params["moe.gate_w"]) + params["moe.gate_b"])
    return ad.reshape(g, (g.shape[1],)) if single else g


def expert_outputs(params, h):
    """Every expert's affine output, shape ``(rows, K, d_h)``."""
    rows, _ = _rows(params, h)
    return ad.einsum("pi,kio->pko", rows, params["moe.expert_w"]) + params["moe.expert_b"]


def moe_encode(params, h):
    """Gate-weighted sum of expert outputs."""
    rows, single = _rows(params, h)
    g = gate_probs(params, rows)
    out = ad.einsum("pk,pko->po", g, expert_outputs(params, rows))
    return ad.reshape(out, (out.shape[1],)) if single else out
