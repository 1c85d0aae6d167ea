"""Seeded synthetic protein/GO datasets with planted structure.

Every protein has a latent vector drawn around its cluster centre.  The
sequence embedding is a fixed linear read-out of the latent plus noise, and
the structure embedding is a cross-modal map of the same clean read-out plus
independent noise, so a correct alignment between the two spaces exists and
is known.  Labels come from cluster-specific GO terms closed under
ancestors, and protein interactions are more likely within a cluster.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import ortho_group

from . import diffusion
from .errors import ContractViolation, DataFault
from .hetgraph import (
    ANNO, GO, NO_SPLIT, NOEDGE, PPI, PROTEIN, TERM, TEST, TRAIN, VALID,
    GoDag, HetGraph, load_edges, load_labels, relation_marginals, save_labels, write_graph,
)
from .numerics import load_matrix, save_matrix
from .otalign import TransportPlan
from .trainer import EnumerableInstance

__all__ = [
    "SynthConfig", "SynthDataset", "gen_dataset", "planted_map_check", "write_dataset",
    "load_dataset", "gen_enumerable_instance", "MAP_KINDS",
]

MAP_KINDS = ("permutation", "identity", "rotation", "random-linear")


@dataclass(frozen=True)
class SynthConfig:
    n_proteins: int = 300
    n_terms: int = 40
    d_seq: int = 16
    d_struc: int = 64
    latent_dim: int = 8
    n_clusters: int = 8
    cluster_scale: float = 1.5
    latent_noise: float = 1.0
    seq_noise: float = 0.3
    struc_noise: float = 2.0
    map_kind: str = "permutation"
    homophily: float = 5.0
    ppi_degree: float = 2.0
    n_roots: int = 3
    max_depth: int = 4
    second_parent_prob: float = 0.3
    terms_per_cluster: int = 2
    label_keep: float = 0.7
    label_noise: float = 0.1
    d_go: int = 8
    train_frac: float = 0.6
    valid_frac: float = 0.2
    min_noedge: float = 0.98
    seed: int = 0

    def __post_init__(self):
        if min(self.d_seq, self.d_struc, self.latent_dim) < 2:
            raise ContractViolation("embedding and latent dimensions must be >= 2")
        if self.homophily < 1:
            raise ContractViolation("homophily ratio must be >= 1")
        if self.map_kind not in MAP_KINDS:
            raise ContractViolation(f"map kind must be one of {MAP_KINDS}, got {self.map_kind!r}")
        if self.map_kind == "permutation" and self.d_struc % self.d_seq:
            raise ContractViolation("permutation map needs d_struc to be a multiple of d_seq")
        if self.map_kind in ("identity", "rotation") and self.d_struc != self.d_seq:
            raise ContractViolation(f"{self.map_kind} map needs d_struc == d_seq")
        if self.n_proteins < self.n_clusters or self.n_clusters < 1:
            raise ContractViolation("need at least one protein per cluster")
        if self.n_terms < self.n_roots or self.n_roots < 1 or self.max_depth < 1:
            raise ContractViolation("term count must cover the roots; depth must be >= 1")
        if self.d_go < 1:
            raise ContractViolation("d_go must be >= 1")
        if not (0 < self.train_frac and 0 <= self.valid_frac and self.train_frac + self.valid_frac < 1):
            raise ContractViolation("split fractions must leave room for a test split")
        if min(self.seq_noise, self.struc_noise, self.latent_noise) < 0:
            raise ContractViolation("noise scales must be non-negative")


@dataclass
class SynthDataset:
    config: SynthConfig
    e_seq: np.ndarray            # (N_p, d_seq)
    e_struc: np.ndarray          # (N_p, d_struc)
    go_feat: np.ndarray          # (N_o, d_go)
    graph: HetGraph              # proteins are nodes 0..N_p-1, terms follow
    labels: np.ndarray           # (N_p, N_o) int8, closed under ancestors
    latents: np.ndarray          # (N_p, latent_dim)
    clusters: np.ndarray         # (N_p,)
    cross_map: np.ndarray        # (d_seq, d_struc)

    @property
    def split(self):
        return self.graph.split[self.graph.proteins]

    @property
    def planted_target(self):
        """Sequence dimension each structure dimension copies (permutation maps only)."""
        if self.config.map_kind not in ("permutation", "identity"):
            return None
        return self.cross_map.argmax(axis=0)

    @property
    def dag(self) -> GoDag:
        return self.graph.go_dag()


def _cross_map(cfg, rng):
    if cfg.map_kind == "identity":
        return np.eye(cfg.d_seq)
    if cfg.map_kind == "permutation":
        src = rng.permutation(cfg.d_struc) % cfg.d_seq
        m = np.zeros((cfg.d_seq, cfg.d_struc))
        m[src, np.arange(cfg.d_struc)] = 1.0
        return m
    if cfg.map_kind == "rotation":
        return ortho_group.rvs(cfg.d_seq, random_state=rng)
    return rng.normal(size=(cfg.d_seq, cfg.d_struc)) / np.sqrt(cfg.d_seq)


def _random_dag(cfg, rng):
    depth = np.zeros(cfg.n_terms, dtype=np.int64)
    pairs = []
    for j in range(cfg.n_roots, cfg.n_terms):
        eligible = np.flatnonzero(depth[:j] < cfg.max_depth - 1)
        n_par = 2 if (rng.random() < cfg.second_parent_prob and len(eligible) > 1) else 1
        parents = rng.choice(eligible, size=n_par, replace=False)
        for p in sorted(parents.tolist()):
            pairs.append((p, j))
        depth[j] = depth[parents].max() + 1
    return pairs, depth


def _labels(cfg, clusters, dag, depth, rng):
    # shallow specific terms keep the ancestor closure, and so the edge count, predictable
    deep = np.flatnonzero((depth >= 1) & (depth <= 2))
    if deep.size < cfg.terms_per_cluster:
        deep = np.arange(cfg.n_terms)
    per_cluster = [rng.choice(deep, size=min(cfg.terms_per_cluster, len(deep)), replace=False)
                   for _ in range(cfg.n_clusters)]
    closure = [sorted(dag.ancestors(t) | {t}) for t in range(cfg.n_terms)]
    y = np.zeros((len(clusters), cfg.n_terms), dtype=np.int8)
    for p, c in enumerate(clusters):
        own = per_cluster[c]
        keep = own[rng.random(len(own)) < cfg.label_keep]
        if keep.size == 0:
            keep = own[:1]
        chosen = set(keep.tolist())
        if rng.random() < cfg.label_noise:
            chosen.add(int(rng.integers(cfg.n_terms)))
        for t in chosen:
            y[p, closure[t]] = 1
    return y


def _ppi(cfg, clusters, rng):
    """Fixed edge counts inside and across clusters, so the density ratio is ``homophily``."""
    n = len(clusters)
    iu, ju = np.triu_indices(n, k=1)
    same = clusters[iu] == clusters[ju]
    s_in, s_out = int(same.sum()), int((~same).sum())
    p_out = cfg.ppi_degree * n / (2.0 * (cfg.homophily * s_in + s_out))
    if cfg.homophily * p_out > 1:
        raise ContractViolation("ppi degree and homophily ask for edge probabilities above 1")
    k_in, k_out = int(round(cfg.homophily * p_out * s_in)), int(round(p_out * s_out))
    pick = np.r_[rng.choice(np.flatnonzero(same), size=k_in, replace=False),
                 rng.choice(np.flatnonzero(~same), size=k_out, replace=False)]
    pick.sort()
    return np.stack([iu[pick], ju[pick]], axis=1)


def _splits(cfg, clusters, rng):
    split = np.empty(len(clusters), dtype=np.int64)
    for c in range(cfg.n_clusters):
        members = rng.permutation(np.flatnonzero(clusters == c))
        n_tr = int(round(cfg.train_frac * len(members)))
        n_va = int(round(cfg.valid_frac * len(members)))
        split[members[:n_tr]] = TRAIN
        split[members[n_tr:n_tr + n_va]] = VALID
        split[members[n_tr + n_va:]] = TEST
    return split


def gen_dataset(config: SynthConfig) -> SynthDataset:
    cfg = config
    # independent streams, so e.g. changing embedding widths leaves the graph untouched
    (r_clusters, r_embed, r_dag, r_labels, r_ppi, r_split, r_go) = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(7))
    n_p, n_o = cfg.n_proteins, cfg.n_terms

    centres = r_clusters.normal(scale=cfg.cluster_scale, size=(cfg.n_clusters, cfg.latent_dim))
    clusters = np.sort(r_clusters.integers(cfg.n_clusters, size=n_p))
    clusters[:cfg.n_clusters] = np.arange(cfg.n_clusters)  # every cluster non-empty
    latents = centres[clusters] + cfg.latent_noise * r_clusters.normal(size=(n_p, cfg.latent_dim))
    readout = r_embed.normal(size=(cfg.latent_dim, cfg.d_seq)) / np.sqrt(cfg.latent_dim)
    signal = latents @ readout
    cross = _cross_map(cfg, r_embed)
    e_seq = signal + cfg.seq_noise * r_embed.normal(size=signal.shape)
    e_struc = signal @ cross + cfg.struc_noise * r_embed.normal(size=(n_p, cfg.d_struc))

    go_pairs, depth = _random_dag(cfg, r_dag)
    dag = GoDag(n_o, go_pairs)
    labels = _labels(cfg, clusters, dag, depth, r_labels)
    ppi = _ppi(cfg, clusters, r_ppi)
    split = _splits(cfg, clusters, r_split)

    go_feat = np.concatenate(
        [depth[:, None] / max(cfg.max_depth - 1, 1), r_go.normal(size=(n_o, cfg.d_go - 1))], axis=1)

    kinds = np.r_[np.full(n_p, PROTEIN), np.full(n_o, TERM)]
    node_split = np.r_[split, np.full(n_o, NO_SPLIT)]
    triples = [(u, v, PPI) for u, v in ppi.tolist()]
    triples += [(n_p + u, n_p + v, GO) for u, v in go_pairs]
    visible = np.flatnonzero(split != TEST)
    rows, cols = np.nonzero(labels[visible])
    triples += [(int(visible[r]), n_p + int(c), ANNO) for r, c in zip(rows, cols)]
    graph = HetGraph.build(kinds, triples, node_split)

    noedge = relation_marginals(graph)[NOEDGE]
    if noedge < cfg.min_noedge:
        raise ContractViolation(
            f"generated graph has noedge fraction {noedge:.4f} < required {cfg.min_noedge}")
    return SynthDataset(cfg, e_seq, e_struc, go_feat, graph, labels, latents, clusters, cross)


def planted_map_check(dataset: SynthDataset, plan) -> float:
    """Fraction of structure dimensions whose plan row peaks at their planted source."""
    if dataset.config.map_kind not in ("permutation", "identity"):
        raise ContractViolation("planted-map recovery needs a permutation map")
    t = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan)
    target = dataset.planted_target
    if t.shape != (dataset.config.d_struc, dataset.config.d_seq):
        raise ContractViolation(f"plan shape {t.shape} does not match the dataset dimensions")
    return float(np.mean(t.argmax(axis=1) == target))


# --------------------------------------------------------------------- files

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(dataset: SynthDataset, directory) -> dict:
    """Write graph TSVs, labels, embedding matrices and a key=value manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = write_graph(dataset.graph, d)
    paths["labels"] = d / "labels.tsv"
    save_labels(paths["labels"], dataset.labels, dataset.graph)
    for name in ("e_seq", "e_struc", "go_feat", "latents", "cross_map"):
        paths[name] = d / f"{name}.mat"
        save_matrix(paths[name], getattr(dataset, name))
    paths["clusters"] = d / "clusters.tsv"
    paths["clusters"].write_text("".join(f"{i}\t{c}\n" for i, c in enumerate(dataset.clusters)))
    lines = [f"config.{k}={v}" for k, v in asdict(dataset.config).items()]
    lines += [f"sha256.{k}={_sha256(p)}" for k, p in sorted(paths.items())]
    paths["manifest"] = d / "manifest.txt"
    paths["manifest"].write_text("\n".join(lines) + "\n")
    return paths


def _parse_config(manifest: Path) -> SynthConfig:
    types = {f.name: f.type for f in fields(SynthConfig)}
    values = {}
    for line in manifest.read_text().splitlines():
        if not line.startswith("config."):
            continue
        key, _, raw = line[len("config."):].partition("=")
        kind = types.get(key)
        if kind is None:
            raise DataFault(f"{manifest}: unknown config key {key!r}")
        values[key] = {"int": int, "float": float}.get(kind, str)(raw)
    return SynthConfig(**values)


def load_dataset(directory) -> SynthDataset:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise DataFault(f"missing dataset manifest: {manifest}")
    cfg = _parse_config(manifest)
    graph = load_edges(d / "edges.tsv", d / "nodes.tsv", d / "splits.tsv")
    labels = load_labels(d / "labels.tsv", graph)
    clusters_path = d / "clusters.tsv"
    if not clusters_path.exists():
        raise DataFault(f"missing file: {clusters_path}")
    clusters = np.array([int(line.split("\t")[1]) for line in clusters_path.read_text().splitlines()])
    mats = {name: load_matrix(d / f"{name}.mat") for name in ("e_seq", "e_struc", "go_feat", "latents", "cross_map")}
    return SynthDataset(cfg, mats["e_seq"], mats["e_struc"], mats["go_feat"], graph, labels,
                        mats["latents"], clusters, mats["cross_map"])


# ------------------------------------------------------- enumerable instances

def gen_enumerable_instance(seed, n_nodes=3, n_conditions=4, d_in=4, d_go=3, T=20, t=None,
                            concentration=0.3, informative=True, constant_condition=False):
    """A tiny joint over (condition, clean graph) for exact entropy checks.

    Node 0 is a protein; the rest are proteins or terms at random.  Each of
    the ``n_conditions`` condition values carries its own Dirichlet
    distribution over clean configurations unless ``informative`` is off.
    ``constant_condition`` makes every condition value the same vector.
    """
    rng = np.random.default_rng(seed)
    if not 2 <= n_nodes <= 3:
        raise ContractViolation("enumerable instances have 2 or 3 nodes")
    if not 1 <= n_conditions <= 4:
        raise ContractViolation("enumerable instances use 1 to 4 condition values")
    kinds = np.r_[PROTEIN, rng.integers(0, 2, size=n_nodes - 1)]
    n_prot = int((kinds == PROTEIN).sum())
    n_term = n_nodes - n_prot
    n_cfg = 4 ** (n_nodes * (n_nodes - 1))
    cond = rng.normal(size=(n_conditions, n_prot, d_in))
    if constant_condition:
        cond[:] = cond[0]
    prior = rng.dirichlet(np.ones(n_conditions))
    if informative:
        clean = rng.dirichlet(np.full(n_cfg, concentration), size=n_conditions)
    else:
        clean = np.repeat(rng.dirichlet(np.full(n_cfg, concentration))[None], n_conditions, axis=0)
    schedule = diffusion.cosine_schedule(T)
    t = int(rng.integers(1, T + 1)) if t is None else t
    marginal = rng.dirichlet(np.ones(4) * 2.0)
    return EnumerableInstance(kinds, cond, rng.normal(size=(n_term, d_go)), prior, clean, t,
                              schedule, marginal)
