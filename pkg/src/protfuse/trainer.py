"""Conditional graph-denoising pre-training of the condition encoder.

Each step samples ego-graphs around random proteins, corrupts their
relations with the forward kernel at a random timestep, encodes the
proteins' intrinsic features with the MoE (or drops the conditions), asks the
denoiser for the clean relations and takes one AdamW step on the encoder and
denoiser parameters together.

:func:`entropy_bound_check` evaluates the expected reconstruction loss and
the exact conditional entropy of the clean graph on instances small enough
to enumerate.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from . import diffusion
from .denoiser import predict_clean
from .errors import ContractViolation, NumericFault
from .hetgraph import DEFAULT_FANOUTS, DIAG, PROTEIN, TERM, HetGraph, relation_marginals, sample_ego
from .moe import moe_encode
from .numerics import OptimState, Tape, ad, adamw_update, save_params

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "LossRecord", "GraphFeatures", "PretrainState", "reconstruction_loss",
    "init_pretrain", "pretrain_step", "pretrain", "write_training_log", "fit_ego", "ego_accuracy",
    "EnumerableInstance", "entropy_bound_check", "instance_entropy", "factorized_model",
    "posterior_model",
    "fit_instance", "MAX_ENUM_PAIRS",
]

MAX_ENUM_PAIRS = 6


@dataclass(frozen=True)
class TrainConfig:
    T: int = 50
    schedule_shift: float = 0.008
    batch_size: int = 8
    steps: int = 300
    lr: float = 1e-3
    weight_decay: float = 1e-12
    p_drop: float = 0.1
    hops: int = 2
    fanouts: tuple = DEFAULT_FANOUTS
    max_nodes: int = 32
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.T, self.batch_size, self.steps, self.hops, self.max_nodes) < 1:
            raise ContractViolation("training counts must be positive")
        if not 0.0 <= self.p_drop < 1.0:
            raise ContractViolation("condition-drop probability must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ContractViolation("learning rate must be positive and weight decay non-negative")


@dataclass
class LossRecord:
    step: int
    loss: float                      # batch mean
    ts: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    conditioned: list = field(default_factory=list)


@dataclass
class GraphFeatures:
    """A graph with per-protein intrinsic rows and per-term feature rows.

    Row ``k`` of ``intrinsic`` belongs to the ``k``-th protein in ascending
    node-id order, likewise for ``go_feat`` and terms.
    """

    graph: HetGraph
    intrinsic: np.ndarray
    go_feat: np.ndarray

    def __post_init__(self):
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64)
        self.go_feat = np.asarray(self.go_feat, dtype=np.float64)
        if self.intrinsic.shape[0] != len(self.graph.proteins):
            raise ContractViolation("one intrinsic row per protein required")
        if self.go_feat.shape[0] != len(self.graph.terms):
            raise ContractViolation("one feature row per GO term required")
        self._row = np.full(self.graph.n_nodes, -1, dtype=np.int64)
        self._row[self.graph.proteins] = np.arange(len(self.graph.proteins))
        self._row[self.graph.terms] = np.arange(len(self.graph.terms))

    def rows(self, nodes, kinds):
        nodes = np.asarray(nodes)
        return (self.intrinsic[self._row[nodes[kinds == PROTEIN]]],
                self.go_feat[self._row[nodes[kinds == TERM]]])


def reconstruction_loss(logits, a0):
    """Mean cross-entropy over ordered off-diagonal pairs.

    ``logits`` has shape ``(n, n, 4)`` or ``(B, n, n, 4)``; ``a0`` holds
    relation codes (or one-hot rows) broadcastable to it.
    """
    a0 = np.asarray(a0)
    if a0.ndim >= 3 and a0.shape[-1] == 4 and a0.shape[-2] == a0.shape[-3]:
        codes = a0.argmax(-1)
        n = codes.shape[-1]
        codes[..., np.arange(n), np.arange(n)] = DIAG
        a0 = codes
    shape = ad.const(logits).shape[:-1]
    a0 = np.broadcast_to(a0, shape)
    n = shape[-1]
    if n < 2:
        raise ContractViolation("reconstruction loss needs at least two nodes")
    mask = np.broadcast_to(~np.eye(n, dtype=bool), shape)
    return ad.softmax_cross_entropy(logits, np.where(mask, a0, 0), mask)


@dataclass
class PretrainState:
    params: dict
    optim: OptimState
    schedule: diffusion.NoiseSchedule
    marginal: np.ndarray
    rng: np.random.Generator
    step: int = 0


def init_pretrain(params, data: GraphFeatures, config: TrainConfig) -> PretrainState:
    return PretrainState(
        params=params,
        optim=OptimState(lr=config.lr, weight_decay=config.weight_decay),
        schedule=diffusion.cosine_schedule(config.T, config.schedule_shift),
        marginal=relation_marginals(data.graph),
        rng=np.random.default_rng(config.seed),
    )


def _sample_batch_graph(data, config, rng):
    proteins = data.graph.proteins
    for _ in range(20):
        center = int(proteins[rng.integers(len(proteins))])
        ego = sample_ego(data.graph, center, config.hops, config.fanouts,
                         seed=int(rng.integers(2**62)), max_nodes=config.max_nodes)
        if ego.n >= 2:
            return ego
    raise ContractViolation("could not sample an ego-graph with at least two nodes")


def pretrain_step(data: GraphFeatures, state: PretrainState, config: TrainConfig, ego=None) -> LossRecord:
    """One optimisation step over a batch of sampled ego-graphs.

    Passing ``ego`` trains every batch element on that one ego-graph.
    """
    rng = state.rng
    record = LossRecord(step=state.step + 1, loss=0.0)
    try:
        with Tape() as tape:
            total = None
            for _ in range(config.batch_size):
                g = ego if ego is not None else _sample_batch_graph(data, config, rng)
                t = int(rng.integers(1, config.T + 1))
                at = diffusion.forward_sample(g.adj, state.schedule, t, state.marginal, rng)
                drop = bool(rng.random() < config.p_drop)
                h, z = data.rows(g.nodes, g.kinds)
                cond = None if drop else moe_encode(state.params, h)
                logits = predict_clean(state.params, g.kinds, at, cond, z, t, drop)
                loss = reconstruction_loss(logits, g.adj)
                total = loss if total is None else total + loss
                record.ts.append(t)
                record.losses.append(float(loss.value))
                record.conditioned.append(not drop)
            batch_loss = total * (1.0 / config.batch_size)
            for p in state.params.values():
                p.zero_grad()
            tape.backward(batch_loss)
    except NumericFault as exc:
        raise NumericFault(f"pre-training step {state.step + 1}: {exc}") from None
    grads = {k: p.grad for k, p in state.params.items()}
    adamw_update(state.params, grads, state.optim)
    state.step += 1
    record.loss = float(batch_loss.value)
    return record


def write_training_log(path, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "loss", "conditioned"])
        for r in records:
            for t, loss, c in zip(r.ts, r.losses, r.conditioned):
                w.writerow([r.step, t, repr(loss), int(c)])
    return path


def pretrain(params, data: GraphFeatures, config: TrainConfig, log_path=None, checkpoint_dir=None):
    """Run ``config.steps`` steps; returns the state and the loss records."""
    state = init_pretrain(params, data, config)
    records = []
    for _ in range(config.steps):
        rec = pretrain_step(data, state, config)
        records.append(rec)
        if config.checkpoint_every and checkpoint_dir and state.step % config.checkpoint_every == 0:
            save_params(Path(checkpoint_dir) / f"step{state.step:06d}", state.params)
        if state.step % 50 == 0 or state.step == config.steps:
            log.info("pretrain step %d loss %.5f", state.step, rec.loss)
    if log_path:
        write_training_log(log_path, records)
    return state, records


def fit_ego(params, data: GraphFeatures, ego, config: TrainConfig):
    """Train on one fixed ego-graph for ``config.steps`` steps."""
    state = init_pretrain(params, data, config)
    records = [pretrain_step(data, state, config, ego=ego) for _ in range(config.steps)]
    return state, records


def ego_accuracy(params, data: GraphFeatures, ego, schedule, marginal, rng, drop=False) -> np.ndarray:
    """Per-timestep fraction of off-diagonal pairs whose argmax matches the clean graph.

    One noisy draw per timestep ``1..T``.
    """
    h, z = data.rows(ego.nodes, ego.kinds)
    cond = None if drop else moe_encode(params, h)
    off = ~np.eye(ego.n, dtype=bool)
    acc = np.empty(schedule.T)
    for t in range(1, schedule.T + 1):
        at = diffusion.forward_sample(ego.adj, schedule, t, marginal, rng)
        logits = predict_clean(params, ego.kinds, at, cond, z, t, drop).value[0]
        acc[t - 1] = np.mean(logits.argmax(-1)[off] == ego.adj[off])
    return acc


# ------------------------------------------------------------------ exact bound

@dataclass
class EnumerableInstance:
    """A joint over (condition index, clean graph) small enough to enumerate.

    ``cond_values[k]`` holds the intrinsic rows of the protein nodes under
    condition ``k``; ``clean_given_cond[k]`` is a distribution over all
    ``4**P`` clean configurations of the ``P`` ordered pairs, enumerated
    with the first off-diagonal pair (row-major) most significant.
    """

    kinds: np.ndarray
    cond_values: np.ndarray          # (K, n_prot, d_in)
    go_feat: np.ndarray              # (n_term, d_go)
    cond_prior: np.ndarray           # (K,)
    clean_given_cond: np.ndarray     # (K, 4**P)
    t: int
    schedule: diffusion.NoiseSchedule
    marginal: np.ndarray

    def __post_init__(self):
        n = len(self.kinds)
        if n * (n - 1) > MAX_ENUM_PAIRS:
            raise ContractViolation(f"{n} nodes give {n * (n - 1)} pairs; enumeration limit is {MAX_ENUM_PAIRS}")
        if self.clean_given_cond.shape != (len(self.cond_prior), 4 ** (n * (n - 1))):
            raise ContractViolation("clean distribution must cover every configuration per condition")

    @property
    def n_pairs(self):
        n = len(self.kinds)
        return n * (n - 1)

    @property
    def configs(self) -> np.ndarray:
        return np.array(list(itertools.product(range(4), repeat=self.n_pairs)), dtype=np.int64)

    def adjacency_batch(self, configs=None) -> np.ndarray:
        configs = self.configs if configs is None else configs
        n = len(self.kinds)
        off = ~np.eye(n, dtype=bool)
        out = np.full((len(configs), n, n), DIAG, dtype=np.int64)
        out[:, off] = configs
        return out

    def noise_matrix(self) -> np.ndarray:
        """``q(A_t = s | A_0 = a)`` indexed ``[s, a]``.

        Pairs are corrupted independently, so this is a Kronecker power of
        the single-pair kernel in the enumeration order of :attr:`configs`.
        """
        if getattr(self, "_noise", None) is None:
            qbar = diffusion.cumulative_transition(self.schedule, self.t, self.marginal)
            out = np.ones((1, 1))
            for _ in range(self.n_pairs):
                out = np.kron(out, qbar.T)
            self._noise = out
        return self._noise

    def group_of(self, k) -> int:
        """Index of the group of condition values with rows identical to ``k``'s."""
        return self._groups()[1][k]

    def _groups(self):
        keys, index = {}, []
        for k in range(len(self.cond_prior)):
            key = np.ascontiguousarray(self.cond_values[k]).tobytes()
            index.append(keys.setdefault(key, len(keys)))
        return len(keys), index

    def group_joints(self) -> list:
        """Joint ``p(s, a, group)`` per group of identical condition rows, indexed ``[s, a]``."""
        n_groups, index = self._groups()
        noise = self.noise_matrix()
        out = [np.zeros_like(noise) for _ in range(n_groups)]
        for k, pk in enumerate(self.cond_prior):
            out[index[k]] += noise * (pk * self.clean_given_cond[k])[None, :]
        return out


def factorized_model(params, instance: EnumerableInstance, drop=False):
    """Wrap the encoder + denoiser as a model returning per-pair log-probabilities.

    ``model(k)`` has shape ``(4**P, P, 4)``: for every noisy configuration
    ``s``, the log-probability of each relation at each ordered pair.
    """
    at = instance.adjacency_batch()
    off = ~np.eye(len(instance.kinds), dtype=bool)

    def model(k):
        cond = None if drop else moe_encode(params, instance.cond_values[k])
        logits = predict_clean(params, instance.kinds, at, cond, instance.go_feat, instance.t, drop).value
        z = logits - logits.max(-1, keepdims=True)
        return (z - np.log(np.exp(z).sum(-1, keepdims=True)))[:, off]

    return model


def posterior_model(instance: EnumerableInstance):
    """The exact posterior of the clean graph given the noisy graph and condition rows."""
    joints = instance.group_joints()

    def model(k):
        joint = joints[instance.group_of(k)]
        z = joint.sum(1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(joint > 0, np.log(joint / np.where(z > 0, z, 1.0)), -np.inf)

    return model


def _letters(n):
    return "abcdefghijklmnopq"[:n]


def _noisy_tensor(clean, qbar, n_pairs, keep=None):
    """Push a clean-configuration tensor through the kernel on every axis but ``keep``."""
    x = clean.reshape((4,) * n_pairs)
    for q in range(n_pairs):
        if q != keep:
            x = np.moveaxis(np.tensordot(x, qbar, axes=([q], [0])), -1, q)
    return x


def entropy_bound_check(instance: EnumerableInstance, model) -> tuple[float, float]:
    """Exact expected loss of ``model`` and the exact conditional entropy.

    ``model(k)`` returns either joint log-probabilities of every clean
    configuration, shape ``(4**P, 4**P)`` indexed ``[s, a]``, or per-pair
    log-probabilities of shape ``(4**P, P, 4)`` for a model that factorizes
    over pairs.  The entropy conditions on the noisy graph and on the
    condition rows the model sees, so condition indices with identical rows
    are merged.  Both numbers are divided by the number of ordered pairs,
    matching the per-pair mean of :func:`reconstruction_loss`.
    """
    n_pairs = instance.n_pairs
    qbar = diffusion.cumulative_transition(instance.schedule, instance.t, instance.marginal)
    s_sub = _letters(n_pairs)
    loss = 0.0
    for k, pk in enumerate(instance.cond_prior):
        if pk == 0:
            continue
        clean = pk * instance.clean_given_cond[k]
        logp = np.asarray(model(k))
        if logp.ndim == 3:
            # the expected log-likelihood needs only each pair's (noisy graph, clean relation) marginal
            for p in range(n_pairs):
                partial = _noisy_tensor(clean, qbar, n_pairs, keep=p)
                t_sub = s_sub[:p] + "r" + s_sub[p + 1:]
                marg = np.einsum(f"{t_sub},r{s_sub[p]}->{s_sub}r", partial, qbar)
                loss -= (marg.reshape(-1, 4) * logp[:, p, :]).sum()
            continue
        joint = instance.noise_matrix() * clean[None, :]                 # [s, a]
        terms = np.multiply(joint, logp, out=np.zeros_like(joint), where=joint > 0)
        if not np.all(np.isfinite(terms)):
            return float("inf"), instance_entropy(instance)
        loss -= terms.sum()
    return float(loss) / n_pairs, instance_entropy(instance)


def instance_entropy(instance: EnumerableInstance) -> float:
    """Per-pair conditional entropy of the clean graph given noise and condition rows.

    With ``J(s, a) = P(a) q(s | a)`` and ``z(s) = sum_a J(s, a)``:
    ``H = -sum P log P - sum_a P(a) sum_s q(s|a) log q(s|a) + sum z log z``,
    and the middle term splits over pairs because ``q`` is a product.
    """
    cached = getattr(instance, "_entropy", None)
    if cached is not None:
        return cached
    n_pairs = instance.n_pairs
    qbar = diffusion.cumulative_transition(instance.schedule, instance.t, instance.marginal)
    row_negent = xlogy(qbar, qbar).sum(1)                                   # sum_j q log q per clean relation
    cfg = instance.configs
    per_config = row_negent[cfg].sum(1)
    n_groups, index = instance._groups()
    total = 0.0
    for g in range(n_groups):
        clean = sum(pk * instance.clean_given_cond[k]
                    for k, pk in enumerate(instance.cond_prior) if index[k] == g)
        z = _noisy_tensor(clean, qbar, n_pairs).ravel()
        total += -xlogy(clean, clean).sum() - clean @ per_config + xlogy(z, z).sum()
    instance._entropy = float(total) / n_pairs
    return instance._entropy


def fit_instance(params, instance: EnumerableInstance, steps=100, lr=3e-3, batch=16, seed=0):
    """Train encoder + denoiser on draws from the instance's own joint."""
    rng = np.random.default_rng(seed)
    state = OptimState(lr=lr)
    cfg = instance.configs
    adj = instance.adjacency_batch(cfg)
    qbar = diffusion.cumulative_transition(instance.schedule, instance.t, instance.marginal)
    off = ~np.eye(len(instance.kinds), dtype=bool)
    for _ in range(steps):
        with Tape() as tape:
            total = None
            for _ in range(batch):
                k = int(rng.choice(len(instance.cond_prior), p=instance.cond_prior))
                a = int(rng.choice(len(cfg), p=instance.clean_given_cond[k]))
                a0 = adj[a]
                at = a0.copy()
                u = rng.random(instance.n_pairs)
                at[off] = np.minimum((u[:, None] >= np.cumsum(qbar[cfg[a]], axis=1)).sum(1), 3)
                cond = moe_encode(params, instance.cond_values[k])
                logits = predict_clean(params, instance.kinds, at, cond, instance.go_feat, instance.t)
                loss = reconstruction_loss(logits, a0)
                total = loss if total is None else total + loss
            for p in params.values():
                p.zero_grad()
            tape.backward(total * (1.0 / batch))
        adamw_update(params, {k: p.grad for k, p in params.items()}, state)
    return params
