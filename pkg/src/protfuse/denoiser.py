"""Graph transformer that predicts clean edge relations from a noisy ego-graph.

Node tokens come from the condition embeddings (proteins) and GO-term
features (terms), each plus a learned node-kind vector.  Every ordered node
pair carries an edge token embedded from its current relation.  A sinusoidal
timestep embedding drives a per-layer scale-and-shift of node and edge
states.  Each layer runs multi-head attention whose scores get an additive
per-head bias projected from the edge token, a feed-forward block, and an
edge update from ``(node_i, node_j, edge_ij)``; all three are residual.  The
head maps final edge tokens to four relation logits.

All contractions over the node axis go through :func:`ad.sorted_sum`, and all
per-node maps use ``einsum``, so relabelling nodes permutes the output
bitwise.  Forward passes accept a leading batch axis over noisy graphs that
share one node set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericFault
from .hetgraph import DIAG, PROTEIN, TERM
from .numerics import ad

__all__ = [
    "DenoiserConfig", "TokenSet", "init_denoiser", "tokenize", "transformer_layer",
    "predict_clean", "edge_probs", "cfg_logits", "time_embedding", "denoiser_config_of",
    "N_EDGE_CATEGORIES",
]

N_EDGE_CATEGORIES = 5  # four relations plus the diagonal
_DIAG_CATEGORY = 4


@dataclass(frozen=True)
class DenoiserConfig:
    d_cond: int = 64
    d_go: int = 8
    d_model: int = 64
    d_edge: int = 32
    n_heads: int = 4
    n_layers: int = 2

    def __post_init__(self):
        if self.n_layers < 1:
            raise ContractViolation("denoiser needs at least one layer")
        if self.d_model % self.n_heads:
            raise ContractViolation("d_model must be divisible by n_heads")
        if min(self.d_cond, self.d_go, self.d_model, self.d_edge, self.n_heads) < 1:
            raise ContractViolation("denoiser widths must be positive")


@dataclass
class TokenSet:
    nodes: ad.Var        # (B, n, d_model)
    edges: ad.Var        # (B, n, n, d_edge), diagonal included
    graph: np.ndarray    # (B, d_model) timestep embedding

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_edge_tokens(self) -> int:
        n = self.n_nodes
        return n * (n - 1)


def _layer_keys(l):
    p = f"den.l{l}."
    return {k: p + k for k in (
        "film_w", "film_b", "ln_n_g", "ln_n_b", "ln_e_g", "ln_e_b",
        "wq", "wk", "wv", "wo", "w_bias", "ln_f_g", "ln_f_b",
        "w_ff1", "b_ff1", "w_ff2", "b_ff2",
        "w_ee", "w_src", "w_dst", "b_e", "w_eo")}


def init_denoiser(cfg: DenoiserConfig, rng=None) -> dict:
    """Fan-in scaled weights, zero time modulation and a zero output head.

    The zero head makes a fresh model predict the uniform distribution.
    """
    rng = np.random.default_rng(rng)
    dm, de, h = cfg.d_model, cfg.d_edge, cfg.n_heads

    def lin(fan_in, *shape):
        return rng.normal(size=(fan_in,) + shape) / np.sqrt(fan_in)

    raw = {
        "den.w_cond": lin(cfg.d_cond, dm), "den.b_cond": np.zeros(dm),
        "den.w_go": lin(cfg.d_go, dm), "den.b_go": np.zeros(dm),
        "den.kind": rng.normal(scale=0.1, size=(2, dm)),
        "den.null": rng.normal(scale=0.1, size=(2, dm)),
        "den.edge_emb": rng.normal(scale=1.0, size=(N_EDGE_CATEGORIES, de)),
        "den.head_ln_g": np.ones(de), "den.head_ln_b": np.zeros(de),
        "den.head_w": np.zeros((de, 4)), "den.head_b": np.zeros(4),
    }
    for l in range(cfg.n_layers):
        k = _layer_keys(l)
        raw.update({
            k["film_w"]: np.zeros((dm, 2 * dm + 2 * de)), k["film_b"]: np.zeros(2 * dm + 2 * de),
            k["ln_n_g"]: np.ones(dm), k["ln_n_b"]: np.zeros(dm),
            k["ln_e_g"]: np.ones(de), k["ln_e_b"]: np.zeros(de),
            k["wq"]: lin(dm, dm), k["wk"]: lin(dm, dm), k["wv"]: lin(dm, dm), k["wo"]: lin(dm, dm),
            k["w_bias"]: lin(de, h),
            k["ln_f_g"]: np.ones(dm), k["ln_f_b"]: np.zeros(dm),
            k["w_ff1"]: lin(dm, 2 * dm), k["b_ff1"]: np.zeros(2 * dm),
            k["w_ff2"]: lin(2 * dm, dm), k["b_ff2"]: np.zeros(dm),
            k["w_ee"]: lin(de, de), k["w_src"]: lin(dm, de), k["w_dst"]: lin(dm, de),
            k["b_e"]: np.zeros(de), k["w_eo"]: lin(de, de),
        })
    return {name: ad.param(v, name) for name, v in raw.items()}


def denoiser_config_of(params) -> DenoiserConfig:
    """Recover the architecture from parameter shapes."""
    layers = sorted({int(k.split(".")[1][1:]) for k in params if k.startswith("den.l")})
    d_cond, dm = ad.const(params["den.w_cond"]).shape
    heads = ad.const(params["den.l0.w_bias"]).shape[1]
    return DenoiserConfig(d_cond=d_cond, d_go=ad.const(params["den.w_go"]).shape[0], d_model=dm,
                          d_edge=ad.const(params["den.edge_emb"]).shape[1], n_heads=heads,
                          n_layers=len(layers))


def time_embedding(t, dim) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


def _edge_categories(at) -> np.ndarray:
    cat = np.asarray(at, dtype=np.int64).copy()
    cat[cat == DIAG] = _DIAG_CATEGORY
    if cat.min(initial=0) < 0 or cat.max(initial=0) >= N_EDGE_CATEGORIES:
        raise ContractViolation("noisy adjacency holds codes outside the relation set")
    n = cat.shape[-1]
    idx = np.arange(n)
    cat[..., idx, idx] = _DIAG_CATEGORY
    return cat


def tokenize(params, kinds, at, cond=None, go_feat=None, t=1, drop=False) -> TokenSet:
    """Build node, edge and graph tokens.

    ``kinds`` is the per-node kind vector, ``at`` the noisy relation codes
    with shape ``(n, n)`` or ``(B, n, n)``.  ``cond`` holds one row per
    protein node in node order (``(n_prot, d_cond)`` or batched), ``go_feat``
    one row per term node.  With ``drop`` both are replaced by the learned
    null vectors and may be omitted.
    """
    kinds = np.asarray(kinds, dtype=np.int64)
    at = np.asarray(at)
    if at.ndim == 2:
        at = at[None]
    b, n = at.shape[0], kinds.size
    if at.shape[1:] != (n, n):
        raise ContractViolation(f"adjacency shape {at.shape[1:]} does not match {n} nodes")
    prot = np.flatnonzero(kinds == PROTEIN)
    term = np.flatnonzero(kinds == TERM)
    if prot.size + term.size != n:
        raise ContractViolation("node kinds must be protein or term")
    dm = ad.const(params["den.kind"]).shape[1]
    kind_rows = ad.take(params["den.kind"], kinds, axis=0)                      # (n, dm)
    if drop:
        content = ad.take(params["den.null"], kinds, axis=0)                    # (n, dm)
        nodes = ad.reshape(content + kind_rows, (1, n, dm)) + np.zeros((b, 1, 1))
    else:
        parts, order = [], np.empty(n, dtype=np.int64)
        if prot.size:
            if cond is None:
                raise ContractViolation("condition rows required for protein nodes")
            c = ad.const(cond)
            if c.shape[-2:] != (prot.size, ad.const(params["den.w_cond"]).shape[0]):
                raise ContractViolation(
                    f"condition rows have shape {c.shape}, expected {prot.size} protein rows")
            if c.value.ndim == 2:
                c = ad.reshape(c, (1,) + c.shape)
            parts.append(ad.einsum("bpi,io->bpo", c, params["den.w_cond"]) + params["den.b_cond"])
        if term.size:
            if go_feat is None:
                raise ContractViolation("GO feature rows required for term nodes")
            z = ad.const(go_feat)
            if z.shape != (term.size, ad.const(params["den.w_go"]).shape[0]):
                raise ContractViolation(
                    f"GO feature rows have shape {z.shape}, expected {term.size} term rows")
            zt = ad.einsum("pi,io->po", z, params["den.w_go"]) + params["den.b_go"]
            parts.append(ad.reshape(zt, (1, term.size, dm)))
        order[prot] = np.arange(prot.size)
        order[term] = prot.size + np.arange(term.size)
        widest = max(p.shape[0] for p in parts)
        parts = [p + np.zeros((widest, 1, 1)) if p.shape[0] != widest else p for p in parts]
        stacked = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        nodes = ad.take(stacked, order, axis=1) + kind_rows
        if nodes.shape[0] != b:
            nodes = nodes + np.zeros((b, 1, 1))
    edges = ad.take(params["den.edge_emb"], _edge_categories(at), axis=0)      # (B, n, n, de)
    t = np.broadcast_to(np.asarray(t), (b,))
    return TokenSet(nodes, edges, time_embedding(t, dm))


def _split_last(x, sizes):
    cuts = np.cumsum((0,) + tuple(sizes))
    return [ad.take(x, np.arange(cuts[i], cuts[i + 1]), axis=-1) for i in range(len(sizes))]


def transformer_layer(params, layer, nodes, edges, graph, n_heads):
    """One residual attention + feed-forward + edge-update block."""
    k = _layer_keys(layer)
    b, n, dm = nodes.shape
    de = edges.shape[-1]
    dh = dm // n_heads
    film = ad.einsum("bt,to->bo", graph, params[k["film_w"]]) + params[k["film_b"]]
    sc_n, sh_n, sc_e, sh_e = _split_last(film, (dm, dm, de, de))
    sc_n, sh_n = ad.reshape(sc_n, (b, 1, dm)), ad.reshape(sh_n, (b, 1, dm))
    sc_e, sh_e = ad.reshape(sc_e, (b, 1, 1, de)), ad.reshape(sh_e, (b, 1, 1, de))

    xn = ad.layer_norm(nodes, params[k["ln_n_g"]], params[k["ln_n_b"]]) * (sc_n + 1.0) + sh_n
    en = ad.layer_norm(edges, params[k["ln_e_g"]], params[k["ln_e_b"]]) * (sc_e + 1.0) + sh_e

    def heads(w):
        return ad.reshape(ad.einsum("bni,io->bno", xn, params[k[w]]), (b, n, n_heads, dh))

    q, kk, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.einsum("bihd,bjhd->bhij", q, kk) * (1.0 / np.sqrt(dh))
    scores = scores + ad.einsum("bije,eh->bhij", en, params[k["w_bias"]])
    shifted = scores - scores.value.max(axis=-1, keepdims=True)
    weights = ad.exp(shifted)
    attn = weights / ad.sorted_sum(weights, axis=-1, keepdims=True)            # (b, h, i, j)
    mixed = ad.sorted_sum(ad.reshape(attn, (b, n_heads, n, n, 1))
                          * ad.reshape(ad.transpose(v, (0, 2, 1, 3)), (b, n_heads, 1, n, dh)),
                          axis=3)                                               # (b, h, i, d)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, dm))
    nodes = nodes + ad.einsum("bni,io->bno", mixed, params[k["wo"]])

    ff = ad.layer_norm(nodes, params[k["ln_f_g"]], params[k["ln_f_b"]])
    ff = ad.relu(ad.einsum("bni,io->bno", ff, params[k["w_ff1"]]) + params[k["b_ff1"]])
    nodes = nodes + ad.einsum("bni,io->bno", ff, params[k["w_ff2"]]) + params[k["b_ff2"]]

    src = ad.reshape(ad.einsum("bni,io->bno", xn, params[k["w_src"]]), (b, n, 1, de))
    dst = ad.reshape(ad.einsum("bni,io->bno", xn, params[k["w_dst"]]), (b, 1, n, de))
    upd = ad.relu(ad.einsum("bije,eo->bijo", en, params[k["w_ee"]]) + src + dst + params[k["b_e"]])
    upd = ad.einsum("bije,eo->bijo", upd, params[k["w_eo"]])
    off = (~np.eye(n, dtype=bool)).astype(np.float64)[None, :, :, None]
    edges = edges + upd * off
    return nodes, edges


def predict_clean(params, kinds, at, cond=None, go_feat=None, t=1, drop=False):
    """Relation logits for every ordered pair, shape ``(B, n, n, 4)``.

    A 2-D ``at`` is treated as a batch of one.  Diagonal logits are
    computed but carry no meaning.
    """
    tok = tokenize(params, kinds, at, cond, go_feat, t, drop)
    n_layers = sum(1 for key in params if key.startswith("den.l") and key.endswith(".film_w"))
    heads = ad.const(params["den.l0.w_bias"]).shape[1]
    nodes, edges = tok.nodes, tok.edges
    for l in range(n_layers):
        nodes, edges = transformer_layer(params, l, nodes, edges, tok.graph, heads)
    e = ad.layer_norm(edges, params["den.head_ln_g"], params["den.head_ln_b"])
    logits = ad.einsum("bije,eo->bijo", e, params["den.head_w"]) + params["den.head_b"]
    if not np.all(np.isfinite(logits.value)):
        raise NumericFault("non-finite denoiser logits")
    return logits


def edge_probs(logits) -> np.ndarray:
    """Softmax over the relation axis of a logits array or ``Var``."""
    z = np.asarray(ad.const(logits).value)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cfg_logits(cond, uncond, w) -> np.ndarray:
    """Guided logits ``(1 + w) * cond - w * uncond``."""
    c = np.asarray(ad.const(cond).value)
    u = np.asarray(ad.const(uncond).value)
    if c.shape != u.shape:
        raise ContractViolation(f"guidance inputs differ in shape: {c.shape} vs {u.shape}")
    if w < 0:
        raise ContractViolation("guidance weight must be non-negative")
    return (1.0 + w) * c - w * u
