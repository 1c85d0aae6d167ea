"""
Pre-training the condition encoder by graph denoising
======================================================

A short run of conditional graph-denoising on the default synthetic graph.
The MoE encodes each protein's aligned features; the denoiser reconstructs
the clean relations of sampled ego-graphs from their corrupted versions.
"""

import logging

import numpy as np

from protfuse.denoiser import DenoiserConfig, init_denoiser
from protfuse.moe import init_moe
from protfuse.otalign import barycentric_project, build_cost, concat_intrinsic, sinkhorn_solve
from protfuse.synthdata import SynthConfig, gen_dataset
from protfuse.trainer import GraphFeatures, TrainConfig, pretrain

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

data = gen_dataset(SynthConfig(seed=0))
plan = sinkhorn_solve(build_cost(data.e_struc, data.e_seq))
h = concat_intrinsic(data.e_seq, barycentric_project(data.e_struc, plan, normalize=True))

params = init_moe(h.shape[1], 32, 4, rng=0)
params.update(init_denoiser(DenoiserConfig(d_cond=32, d_go=data.go_feat.shape[1]), rng=1))

state, records = pretrain(params, GraphFeatures(data.graph, h, data.go_feat),
                          TrainConfig(steps=100, lr=1e-3))

losses = np.array([r.loss for r in records])
for lo in range(0, 100, 20):
    print(f"steps {lo:3d}-{lo + 19:3d}: mean loss {losses[lo:lo + 20].mean():.4f}")
