"""Heterogeneous protein/GO graph, GO DAG helpers and ego-graph sampling.

Node ids are dense integers; each node is a protein or a GO term.  Edges are
ordered ``(src, dst, relation)`` triples:

* ``ppi``  protein <-> protein, stored in both directions
* ``go``   parent term -> child term (the DAG direction)
* ``anno`` protein -> term

Every ordered pair without an explicit edge implicitly carries ``noedge``.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataFault

log = logging.getLogger(__name__)

RELATIONS = ("ppi", "go", "anno", "noedge")
PPI, GO, ANNO, NOEDGE = range(4)
N_REL = len(RELATIONS)

PROTEIN, TERM = 0, 1
KINDS = ("protein", "go")
SPLITS = ("train", "valid", "test")
TRAIN, VALID, TEST = range(3)
NO_SPLIT = -1

DIAG = -1  # placeholder on the diagonal of adjacency matrices


@dataclass(frozen=True)
class NodeRef:
    id: int
    kind: int


class GoDag:
    """Parent/child index over term positions ``0..n_terms-1``."""

    def __init__(self, n_terms, parent_child_pairs):
        self.n_terms = n_terms
        self.parents = [[] for _ in range(n_terms)]
        self.children = [[] for _ in range(n_terms)]
        for p, c in parent_child_pairs:
            if p == c:
                continue
            if c not in self.children[p]:
                self.children[p].append(c)
                self.parents[c].append(p)
        self.order = self._topological_order()

    def _topological_order(self):
        indeg = np.array([len(p) for p in self.parents])
        ready = sorted(np.nonzero(indeg == 0)[0].tolist())
        order = []
        while ready:
            node = ready.pop(0)
            order.append(node)
            for c in self.children[node]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != self.n_terms:
            stuck = set(range(self.n_terms)) - set(order)
            node = min(stuck)
            seen = []
            while node not in seen:  # walk parents inside the stuck set to land on a cycle
                seen.append(node)
                node = next(p for p in self.parents[node] if p in stuck)
            raise DataFault(f"GO hierarchy contains a cycle through term {node}")
        return order

    def ancestors(self, term):
        out, stack = set(), list(self.parents[term])
        while stack:
            p = stack.pop()
            if p not in out:
                out.add(p)
                stack.extend(self.parents[p])
        return out

    def descendants(self, term):
        out, stack = set(), list(self.children[term])
        while stack:
            c = stack.pop()
            if c not in out:
                out.add(c)
                stack.extend(self.children[c])
        return out

    def depth(self):
        d = np.zeros(self.n_terms, dtype=np.int64)
        for t in self.order:
            for c in self.children[t]:
                d[c] = max(d[c], d[t] + 1)
        return d


@dataclass
class HetGraph:
    kinds: np.ndarray                 # (n_nodes,) PROTEIN or TERM
    edges: np.ndarray                 # (n_edges, 3) src, dst, relation; sorted, unique
    split: np.ndarray                 # (n_nodes,) TRAIN/VALID/TEST for proteins, NO_SPLIT for terms
    _out: dict = field(default=None, repr=False)
    _nbrs: dict = field(default=None, repr=False)

    @classmethod
    def build(cls, kinds, triples, split, check_leakage=True):
        """Validate and normalise a raw edge list.

        Drops self-loops (counted, logged), collapses duplicates, symmetrises
        ppi, checks endpoint kinds and GO acyclicity, and optionally rejects
        annotation edges on test proteins.
        """
        kinds = np.asarray(kinds, dtype=np.int64)
        split = np.asarray(split, dtype=np.int64)
        n = len(kinds)
        if split.shape != kinds.shape:
            raise ContractViolation("split assignment must cover every node")
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if arr.size and (arr[:, :2].min() < 0 or arr[:, :2].max() >= n):
            bad = arr[(arr[:, :2] < 0).any(1) | (arr[:, :2] >= n).any(1)][0]
            raise DataFault(f"edge references unregistered node: {tuple(bad[:2])}")
        loops = arr[:, 0] == arr[:, 1]
        if loops.any():
            log.warning("dropped %d self-loop edge(s)", int(loops.sum()))
            arr = arr[~loops]
        src_k, dst_k, rel = kinds[arr[:, 0]], kinds[arr[:, 1]], arr[:, 2]
        if np.any((rel < 0) | (rel >= NOEDGE)):
            raise DataFault("edge relation must be ppi, go or anno")
        bad = ((rel == PPI) & ((src_k != PROTEIN) | (dst_k != PROTEIN))) \
            | ((rel == GO) & ((src_k != TERM) | (dst_k != TERM))) \
            | ((rel == ANNO) & ((src_k != PROTEIN) | (dst_k != TERM)))
        if bad.any():
            u, v, r = arr[np.argmax(bad)]
            raise DataFault(f"edge ({u}, {v}, {RELATIONS[r]}) joins the wrong node kinds")
        ppi = arr[rel == PPI]
        arr = np.vstack([arr, ppi[:, [1, 0, 2]]]) if len(ppi) else arr
        arr = np.unique(arr, axis=0) if len(arr) else arr.reshape(0, 3)
        pairs = arr[:, :2]
        if len(pairs):
            _, first, counts = np.unique(pairs, axis=0, return_index=True, return_counts=True)
            if counts.max() > 1:
                u, v = pairs[first[np.argmax(counts)]]
                raise DataFault(f"conflicting relations for ordered pair ({u}, {v})")
        graph = cls(kinds, arr, split)
        graph.go_dag()  # raises on cycles
        if check_leakage:
            leak = graph.test_annotations()
            if len(leak):
                u, v = leak[0, :2]
                raise DataFault(f"annotation edge ({u}, {v}) touches test protein {u} (label leakage)")
        return graph

    # -- views ---------------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.kinds)

    @property
    def proteins(self):
        return np.nonzero(self.kinds == PROTEIN)[0]

    @property
    def terms(self):
        return np.nonzero(self.kinds == TERM)[0]

    def edges_of(self, relation):
        return self.edges[self.edges[:, 2] == relation, :2]

    def test_annotations(self):
        anno = self.edges[self.edges[:, 2] == ANNO]
        return anno[self.split[anno[:, 0]] == TEST]

    def term_index(self):
        """Map GO node id -> position among terms (ascending id order)."""
        return {int(t): k for k, t in enumerate(self.terms)}

    def go_dag(self) -> GoDag:
        idx = self.term_index()
        return GoDag(len(idx), [(idx[int(u)], idx[int(v)]) for u, v in self.edges_of(GO)])

    def out_edges(self):
        if self._out is None:
            out = defaultdict(list)
            for u, v, r in self.edges.tolist():
                out[u].append((v, r))
            self._out = out
        return self._out

    def neighbors(self, node, relation):
        """Neighbours reachable through ``relation`` ignoring edge direction."""
        if self._nbrs is None:
            nb = defaultdict(set)
            for u, v, r in self.edges.tolist():
                nb[(u, r)].add(v)
                nb[(v, r)].add(u)
            self._nbrs = {k: np.array(sorted(s), dtype=np.int64) for k, s in nb.items()}
        return self._nbrs.get((int(node), relation), np.empty(0, dtype=np.int64))


# ---------------------------------------------------------------- file I/O

def _read_tsv(path, ncols):
    path = Path(path)
    if not path.exists():
        raise DataFault(f"missing input file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != ncols:
            raise DataFault(f"{path}:{lineno}: expected {ncols} tab-separated fields")
        rows.append(parts)
    return rows


def load_edges(edge_file, node_file, split_file) -> HetGraph:
    nodes = _read_tsv(node_file, 2)
    try:
        ids = [int(i) for i, _ in nodes]
        kinds_map = {int(i): KINDS.index(k.strip()) for i, k in nodes}
    except ValueError as exc:
        raise DataFault(f"{node_file}: {exc}") from None
    n = len(ids)
    if sorted(ids) != list(range(n)):
        raise DataFault(f"{node_file}: node ids must be dense in [0, {n})")
    kinds = np.array([kinds_map[i] for i in range(n)])
    split = np.full(n, NO_SPLIT)
    for pid, name in _read_tsv(split_file, 2):
        pid = int(pid)
        if not 0 <= pid < n or kinds[pid] != PROTEIN:
            raise DataFault(f"{split_file}: {pid} is not a registered protein")
        if name.strip() not in SPLITS:
            raise DataFault(f"{split_file}: unknown split {name!r}")
        split[pid] = SPLITS.index(name.strip())
    triples = []
    for u, v, r in _read_tsv(edge_file, 3):
        if r.strip() not in RELATIONS[:3]:
            raise DataFault(f"{edge_file}: unknown relation {r!r}")
        triples.append((int(u), int(v), RELATIONS.index(r.strip())))
    return HetGraph.build(kinds, triples, split, check_leakage=True)


def write_graph(graph: HetGraph, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"nodes": d / "nodes.tsv", "edges": d / "edges.tsv", "splits": d / "splits.tsv"}
    paths["nodes"].write_text("".join(f"{i}\t{KINDS[k]}\n" for i, k in enumerate(graph.kinds)))
    lines = []
    for u, v, r in graph.edges.tolist():
        if r == PPI and u > v:
            continue  # symmetric partner written once
        lines.append(f"{u}\t{v}\t{RELATIONS[r]}\n")
    paths["edges"].write_text("".join(lines))
    paths["splits"].write_text("".join(
        f"{p}\t{SPLITS[graph.split[p]]}\n" for p in graph.proteins))
    return paths


def load_labels(path, graph: HetGraph) -> np.ndarray:
    """Binary (n_proteins, n_terms) matrix in ascending protein / term id order."""
    prot_pos = {int(p): k for k, p in enumerate(graph.proteins)}
    term_pos = graph.term_index()
    y = np.zeros((len(prot_pos), len(term_pos)), dtype=np.int8)
    for p, t in _read_tsv(path, 2):
        p, t = int(p), int(t)
        if p not in prot_pos or t not in term_pos:
            raise DataFault(f"{path}: label ({p}, {t}) references unknown protein or term")
        y[prot_pos[p], term_pos[t]] = 1
    return y


def save_labels(path, labels, graph: HetGraph) -> None:
    prots, terms = graph.proteins, graph.terms
    rows, cols = np.nonzero(labels)
    Path(path).write_text("".join(f"{prots[r]}\t{terms[c]}\n" for r, c in zip(rows, cols)))


# ---------------------------------------------------------------- operations

def strip_test_annotations(graph: HetGraph) -> HetGraph:
    e = graph.edges
    drop = (e[:, 2] == ANNO) & (graph.split[e[:, 0]] == TEST)
    return HetGraph(graph.kinds, e[~drop], graph.split)


def relation_marginals(source) -> np.ndarray:
    """Distribution of the four relations over ordered node pairs ``i != j``.

    ``source`` is a :class:`HetGraph`, one :class:`EgoGraph`/adjacency
    matrix, or an iterable of them.
    """
    counts = np.zeros(N_REL)
    if isinstance(source, HetGraph):
        n = source.n_nodes
        pairs = n * (n - 1)
        counts[:NOEDGE] = np.bincount(source.edges[:, 2], minlength=NOEDGE)[:NOEDGE]
        counts[NOEDGE] = pairs - counts[:NOEDGE].sum()
    else:
        items = [source] if isinstance(source, (EgoGraph, np.ndarray)) else list(source)
        for item in items:
            adj = item.adj if isinstance(item, EgoGraph) else np.asarray(item)
            off = ~np.eye(adj.shape[0], dtype=bool)
            counts += np.bincount(adj[off].ravel(), minlength=N_REL)[:N_REL]
    total = counts.sum()
    if total <= 0:
        raise ContractViolation("relation marginals need at least one ordered pair")
    return counts / total


@dataclass
class EgoGraph:
    center: int
    nodes: np.ndarray   # local -> global id; nodes[0] is the centre
    kinds: np.ndarray   # per local node
    adj: np.ndarray     # (n, n) relation codes, DIAG on the diagonal

    @property
    def n(self):
        return len(self.nodes)

    def onehot(self):
        """(n, n, 4) one-hot tensor; diagonal rows are all zero."""
        oh = np.zeros(self.adj.shape + (N_REL,))
        off = self.adj >= 0
        oh[off, self.adj[off]] = 1.0
        return oh


DEFAULT_FANOUTS = ({PPI: 4, GO: 2, ANNO: 4}, {PPI: 2, GO: 2, ANNO: 2})


def sample_ego(graph: HetGraph, center, hops=2, fanouts=DEFAULT_FANOUTS, seed=0,
               max_nodes=32) -> EgoGraph:
    """Seeded breadth-wise neighbour sampling around a protein.

    ``fanouts`` is a ``{relation: count}`` mapping used at every hop, or a
    sequence of such mappings (one per hop; the last one repeats).  A plain
    integer stands for the same count on every relation.
    """
    center = int(getattr(center, "id", center))
    if graph.kinds[center] != PROTEIN:
        raise ContractViolation(f"ego-graph centre {center} is not a protein")
    if hops < 1:
        raise ContractViolation("hops must be >= 1")
    per_hop = [fanouts] if isinstance(fanouts, (dict, int)) else list(fanouts)
    per_hop = [{PPI: f, GO: f, ANNO: f} if isinstance(f, (int, np.integer)) else f for f in per_hop]
    if any(c < 0 for f in per_hop for c in f.values()):
        raise ContractViolation("fanouts must be non-negative")
    rng = np.random.default_rng(seed)
    chosen = [center]
    seen = {center}
    frontier = [center]
    for hop in range(hops):
        fan = per_hop[min(hop, len(per_hop) - 1)]
        nxt = []
        for node in frontier:
            for rel in (PPI, GO, ANNO):
                k = fan.get(rel, 0)
                if k == 0:
                    continue
                cand = [int(x) for x in graph.neighbors(node, rel) if int(x) not in seen]
                if not cand:
                    continue
                pick = rng.choice(len(cand), size=min(k, len(cand)), replace=False)
                for i in sorted(pick.tolist()):
                    if len(chosen) >= max_nodes:
                        break
                    v = cand[i]
                    seen.add(v)
                    chosen.append(v)
                    nxt.append(v)
        frontier = nxt
        if not frontier or len(chosen) >= max_nodes:
            break
    nodes = np.array(chosen, dtype=np.int64)
    out = graph.out_edges()
    local = {g: i for i, g in enumerate(chosen)}
    induced = [(local[u], local[v], r) for u in chosen for v, r in out.get(u, ()) if v in local]
    return EgoGraph(center, nodes, graph.kinds[nodes], build_adjacency(len(nodes), induced))


def build_adjacency(n_nodes, edges) -> np.ndarray:
    """Assign exactly one relation to every ordered pair ``i != j``."""
    adj = np.full((n_nodes, n_nodes), NOEDGE, dtype=np.int64)
    np.fill_diagonal(adj, DIAG)
    for u, v, r in edges:
        if u == v:
            continue
        if adj[u, v] != NOEDGE and adj[u, v] != r:
            raise DataFault(f"conflicting relations {RELATIONS[adj[u, v]]}/{RELATIONS[r]} for pair ({u}, {v})")
        adj[u, v] = r
    return adj
