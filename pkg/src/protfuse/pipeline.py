"""Resumable end-to-end run: data, alignment, pre-training, fine-tuning, evaluation.

Every stage writes into ``<out>/seed-<n>/<stage>-<digest>/`` where the digest
hashes exactly the config sections the stage depends on, plus the seed.  A
stage whose directory holds a ``done`` marker is loaded instead of rerun, so
ablation variants share the data and alignment work and an interrupted run
picks up where it stopped.  All arrays go through the lossless text matrix
format, which keeps a resumed run bit-identical to a fresh one.

Variants: ``full`` encodes OT-aligned features with a pre-trained encoder,
``no_cgg`` uses the same features with a freshly initialised encoder and
``concat`` feeds the raw sequence and structure embeddings side by side to a
fresh encoder.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .denoiser import DenoiserConfig, init_denoiser
from .errors import DataFault
from .hetgraph import ANNO, GO, PPI, TEST, HetGraph, load_edges, load_labels
from .moe import init_moe, moe_encode
from .numerics import load_matrix, load_params, param, save_matrix, save_params
from .otalign import barycentric_project, build_cost, concat_intrinsic, load_plan, save_plan, sinkhorn_solve
from .predictor import (
    FinetuneConfig, aupr, finetune, fmax, init_classifier, predict, true_path_propagate,
    read_metrics, write_metrics, write_predictions,
)
from .synthdata import SynthConfig, gen_dataset, write_dataset
from .trainer import GraphFeatures, TrainConfig, pretrain, write_training_log

log = logging.getLogger(__name__)

__all__ = ["STAGES", "Inputs", "SeedRun", "load_inputs", "run_pipeline", "bench_encoder",
           "snapshot_config"]

STAGES = ("gen-data", "align", "pretrain", "finetune", "evaluate")

_STAGE_SECTIONS = {
    "data": ("data",),
    "align": ("data", "ot"),
    "pretrain": ("data", "ot", "diffusion", "model", "pretrain"),
    "finetune": ("data", "ot", "diffusion", "model", "pretrain", "finetune", "eval"),
}


@dataclass
class Inputs:
    """What the pipeline consumes: embeddings, the graph and the label matrix."""

    e_seq: np.ndarray
    e_struc: np.ndarray
    go_feat: np.ndarray
    graph: HetGraph
    labels: np.ndarray

    def __post_init__(self):
        n_p, n_o = len(self.graph.proteins), len(self.graph.terms)
        if self.e_seq.shape[0] != n_p or self.e_struc.shape[0] != n_p:
            raise DataFault(f"embedding rows must match the {n_p} proteins in the graph")
        if self.go_feat.shape[0] != n_o or self.labels.shape != (n_p, n_o):
            raise DataFault(f"term features and labels must match {n_p} proteins x {n_o} terms")

    @property
    def test_rows(self):
        return np.flatnonzero(self.graph.split[self.graph.proteins] == TEST)

    @property
    def fit_rows(self):
        return np.flatnonzero(self.graph.split[self.graph.proteins] != TEST)


def load_inputs(directory) -> Inputs:
    """Read ``nodes/edges/splits/labels.tsv`` and ``e_seq/e_struc/go_feat.mat``."""
    d = Path(directory)
    if not d.is_dir():
        raise DataFault(f"data directory not found: {d}")
    graph = load_edges(d / "edges.tsv", d / "nodes.tsv", d / "splits.tsv")
    labels = load_labels(d / "labels.tsv", graph)
    mats = {k: load_matrix(d / f"{k}.mat") for k in ("e_seq", "e_struc", "go_feat")}
    return Inputs(mats["e_seq"], mats["e_struc"], mats["go_feat"], graph, labels)


def snapshot_config(config: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text(config.dump())
    return path


def _synth_config(config: RunConfig, seed) -> SynthConfig:
    values = {k: v for k, v in config["data"].items() if k not in ("source", "dir")}
    return SynthConfig(seed=seed, **values)


def _fanouts(config: RunConfig):
    p = config["pretrain"]
    return tuple({PPI: a, GO: b, ANNO: c}
                 for a, b, c in zip(p["fanout_ppi"], p["fanout_go"], p["fanout_anno"]))


class SeedRun:
    """The stages of one seed, each computed at most once and cached on disk."""

    def __init__(self, config: RunConfig, out_dir, seed: int):
        self.config, self.seed = config, int(seed)
        self.root = Path(out_dir) / f"seed-{self.seed}"
        self._inputs = None

    def stage_dir(self, stage) -> Path:
        digest = self.config.digest(_STAGE_SECTIONS[stage], extra=f"seed={self.seed}\n")
        return self.root / f"{stage}-{digest}"

    @staticmethod
    def _done(d: Path) -> bool:
        return (d / "done").exists()

    @staticmethod
    def _finish(d: Path):
        (d / "done").write_text("")

    # ---- data
    def inputs(self) -> Inputs:
        if self._inputs is None:
            data = self.config["data"]
            if data["source"] == "files":
                self._inputs = load_inputs(data["dir"])
            else:
                d = self.stage_dir("data")
                if not self._done(d):
                    log.info("seed %d: generating synthetic data in %s", self.seed, d)
                    write_dataset(gen_dataset(_synth_config(self.config, self.seed)), d)
                    self._finish(d)
                self._inputs = load_inputs(d)
        return self._inputs

    # ---- alignment
    def aligned(self) -> np.ndarray:
        """OT-aligned intrinsic features ``[E_seq, E_struc T*]``."""
        d = self.stage_dir("align")
        path = d / "intrinsic.mat"
        if not self._done(d):
            inp, ot = self.inputs(), self.config["ot"]
            t0 = time.perf_counter()
            plan = sinkhorn_solve(build_cost(inp.e_struc, inp.e_seq), epsilon=ot["epsilon"],
                                  cost_tol=ot["cost_tol"], max_iter=ot["max_iter"])
            log.info("seed %d: sinkhorn converged in %d iterations (%.2fs), marginal error %.2e",
                     self.seed, plan.iterations, time.perf_counter() - t0, plan.marginal_error)
            d.mkdir(parents=True, exist_ok=True)
            save_plan(d / "plan.mat", plan)
            e_al = barycentric_project(inp.e_struc, plan, normalize=ot["normalize"])
            save_matrix(path, concat_intrinsic(inp.e_seq, e_al))
            self._finish(d)
        return load_matrix(path)

    def intrinsic(self) -> np.ndarray:
        if self.config["eval"]["variant"] == "concat":
            inp = self.inputs()
            return np.concatenate([inp.e_seq, inp.e_struc], axis=1)
        return self.aligned()

    def plan(self):
        self.aligned()
        return load_plan(self.stage_dir("align") / "plan.mat")

    # ---- pre-training
    def _fresh_encoder(self, d_in) -> dict:
        m = self.config["model"]
        return init_moe(d_in, m["d_h"], m["n_experts"], rng=self.seed)

    def pretrained(self) -> dict:
        """Encoder and denoiser weights after conditional graph-denoising pre-training."""
        d = self.stage_dir("pretrain")
        if not self._done(d):
            h, inp = self.aligned(), self.inputs()
            m, p, diff = self.config["model"], self.config["pretrain"], self.config["diffusion"]
            params = self._fresh_encoder(h.shape[1])
            params.update(init_denoiser(DenoiserConfig(
                d_cond=m["d_h"], d_go=inp.go_feat.shape[1], d_model=m["d_model"],
                d_edge=m["d_edge"], n_heads=m["n_heads"], n_layers=m["n_layers"]), self.seed + 1))
            tc = TrainConfig(T=diff["T"], schedule_shift=diff["schedule_shift"],
                             batch_size=p["batch_size"], steps=p["steps"], lr=p["lr"],
                             weight_decay=p["weight_decay"], p_drop=p["p_drop"], hops=p["hops"],
                             fanouts=_fanouts(self.config), max_nodes=p["max_nodes"],
                             checkpoint_every=p["checkpoint_every"], seed=self.seed)
            d.mkdir(parents=True, exist_ok=True)
            _, records = pretrain(params, GraphFeatures(inp.graph, h, inp.go_feat), tc,
                                  checkpoint_dir=d / "checkpoints")
            write_training_log(d / "training_log.csv", records)
            save_params(d / "params", params)
            self._finish(d)
        return load_params(d / "params")

    # ---- fine-tuning
    def finetuned(self) -> dict:
        d = self.stage_dir("finetune")
        if not self._done(d):
            h, inp = self.intrinsic(), self.inputs()
            m, f = self.config["model"], self.config["finetune"]
            params = self._fresh_encoder(h.shape[1])
            if self.config["eval"]["variant"] == "full":
                for k, v in self.pretrained().items():
                    if k in params:
                        params[k].value[...] = v
            params.update(init_classifier(m["d_h"], inp.labels.shape[1], m["classifier_hidden"],
                                          self.seed + 2))
            fc = FinetuneConfig(steps=f["steps"], batch_size=f["batch_size"], lr=f["lr"],
                                warmup_frac=f["warmup_frac"], weight_decay=f["weight_decay"],
                                hidden=m["classifier_hidden"], train_encoder=f["train_encoder"],
                                seed=self.seed)
            rows = inp.fit_rows
            _, losses = finetune(params, h[rows], inp.labels[rows], fc)
            log.info("seed %d: fine-tuned %s on %d proteins, loss %.5f -> %.5f", self.seed,
                     self.config["eval"]["variant"], rows.size, losses[0], losses[-1])
            d.mkdir(parents=True, exist_ok=True)
            save_params(d / "params", params)
            self._finish(d)
        return load_params(d / "params")

    # ---- evaluation
    def evaluate(self) -> list[tuple[str, float, int]]:
        d = self.stage_dir("finetune") / "eval"
        if not self._done(d):
            inp, h = self.inputs(), self.intrinsic()
            params = _as_params(self.finetuned())
            te = inp.test_rows
            scores = true_path_propagate(predict(params, h[te]), inp.graph.go_dag())
            d.mkdir(parents=True, exist_ok=True)
            write_predictions(d / "predictions.tsv", scores, inp.graph.proteins[te].tolist(),
                              inp.graph.terms.tolist())
            y = inp.labels[te]
            write_metrics(d / "metrics.csv", [("fmax", fmax(scores, y)[0], self.seed),
                                              ("aupr", aupr(scores, y), self.seed)])
            self._finish(d)
        return read_metrics(d / "metrics.csv")

    def run(self, until="evaluate"):
        """Run every stage up to and including ``until``."""
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        steps = {
            "gen-data": self.inputs,
            "align": self.aligned,
            "pretrain": self.pretrained,
            "finetune": self.finetuned,
            "evaluate": self.evaluate,
        }
        result = None
        for stage in STAGES[:STAGES.index(until) + 1]:
            if stage == "pretrain" and self.config["eval"]["variant"] != "full" and until != "pretrain":
                continue
            if stage == "align" and self.config["eval"]["variant"] == "concat" and until != "align":
                continue
            result = steps[stage]()
        return result


def _as_params(values: dict) -> dict:
    return {k: param(np.array(v), k) for k, v in values.items()}


def run_pipeline(config: RunConfig, out_dir, until="evaluate") -> Path | None:
    """Run all seeds up to ``until``; after evaluation writes ``<out>/metrics.csv``."""
    out = Path(out_dir)
    snapshot_config(config, out)
    rows = []
    for seed in config["run"]["seeds"]:
        result = SeedRun(config, out, seed).run(until)
        if until == "evaluate":
            rows.extend(result)
    if until != "evaluate":
        return None
    path = write_metrics(out / "metrics.csv", rows)
    log.info("metrics written to %s", path)
    return path


def bench_encoder(config: RunConfig, out_dir, seed=None, repeats=None, batch_size=None):
    """Time encoder inference on a fixed batch; returns the report rows.

    Times more than three standard deviations from the mean are dropped
    before the summary statistics are computed.
    """
    seed = config["run"]["seeds"][0] if seed is None else seed
    repeats = config["bench"]["repeats"] if repeats is None else repeats
    batch_size = config["bench"]["batch_size"] if batch_size is None else batch_size
    run = SeedRun(config, out_dir, seed)
    ckpt = run.stage_dir("finetune") / "params"
    if not SeedRun._done(run.stage_dir("finetune")):
        raise DataFault(f"no trained checkpoint at {ckpt}; run finetune first")
    params = {k: v for k, v in _as_params(load_params(ckpt)).items() if k.startswith("moe.")}
    h = run.intrinsic()
    batch = np.resize(h, (batch_size, h.shape[1]))   # same rows every repeat
    moe_encode(params, batch)                        # warm-up
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        moe_encode(params, batch)
        times[i] = time.perf_counter() - t0
    mu, sd = times.mean(), times.std()
    kept = times[np.abs(times - mu) <= 3 * sd] if sd > 0 else times
    mean = float(kept.mean())
    return [("repeats", repeats), ("retained", int(kept.size)), ("batch_size", batch_size),
            ("mean_s", mean), ("std_s", float(kept.std())), ("throughput_per_s", batch_size / mean)]
