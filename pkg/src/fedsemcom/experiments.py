"""Desk-scale comparison runs used by the acceptance suite and the README."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .fl import RunConfig, prepare_data, run_training
from .model import ModelSpec

DESK_MODEL = ModelSpec(
    image_shape=(3, 16, 16),
    patch_size=4,
    semantic_hidden=64,
    patch_features=8,
    channel_width=16,
    snr_width=4,
)

# Table-1 structure (10 clients, 3 local epochs, batch 16) at 50 rounds.  The
# learning rate is raised from 1e-4 because plain SGD on this model barely
# moves in 50 rounds at that rate.
DESK_CONFIG = RunConfig(
    num_clients=10,
    global_rounds=50,
    local_epochs=3,
    update_interval=5,
    lr=1.0,
    batch_size=16,
    alpha=0.5,
    snr_train_db=10.0,
    fading="none",
    eval_interval=25,
    samples_per_class=200,
    model=DESK_MODEL,
)

DESK_SEEDS = (0, 1, 2)

VARIANTS = {
    "fedavg-full": dict(strategy="fedavg", partial_update=False),
    "fedavg-partial": dict(strategy="fedavg", partial_update=True),
    "fedlol-full": dict(strategy="fedlol", partial_update=False),
    "centralized": dict(strategy="centralized", partial_update=False),
}


def final_psnr(variant: str, seed: int, base: RunConfig = DESK_CONFIG) -> float:
    cfg = replace(base, seed=seed, **VARIANTS[variant])
    report = run_training(cfg, data=prepare_data(cfg))
    return report.final().eval_psnr_db


def compare(variants=tuple(VARIANTS), seeds=DESK_SEEDS, base: RunConfig = DESK_CONFIG) -> dict[str, list[float]]:
    """Final-round eval PSNR for each variant and seed."""
    return {v: [final_psnr(v, s, base) for s in seeds] for v in variants}


def mean(values) -> float:
    return float(np.mean(values))
