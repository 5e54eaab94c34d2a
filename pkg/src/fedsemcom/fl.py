"""Federated training of the semantic codec.

Each global round the server broadcasts either the whole model or only the
semantic encoder/decoder, every client synchronizes and runs a few local
epochs of SGD through the noisy channel, uploads its model (again whole or
semantic-only) together with its final local loss, and the server aggregates
the uploaded groups with FedLol, FedAvg or FedProx weights.  Bytes moved in
each direction are recorded exactly.
"""

from __future__ import annotations

import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import channel as ch
from .data import Dataset, batch_iter, dirichlet_partition, holdout_split, load_dataset, synthetic_dataset
from .errors import ConfigError, DegenerateLossError, DivergenceError, LayoutError, ProtocolError
from .metrics import batch_quality
from .model import ModelSpec, SemComModel, make_channel_fn, sgd_step
from .params import (
    ALL_GROUPS,
    SEMANTIC_GROUPS,
    GroupLayout,
    ParamVector,
    byte_size,
    overwrite_groups,
    weighted_sum,
)
from .report import ReportRow, TrainingReport

log = logging.getLogger(__name__)

STRATEGIES = ("fedlol", "fedavg", "fedprox", "centralized")

# Independent RNG stream tags: (run_seed, tag, ...) seeds one stream each.
_STREAM_PARTITION = 11
_STREAM_BATCHES = 21
_STREAM_CHANNEL = 22
_STREAM_EVAL = 31
EVAL_STREAM = _STREAM_EVAL  # shared with the evaluate subcommand
_STREAM_CENTRAL = 41


@dataclass(frozen=True)
class RunConfig:
    num_clients: int = 10
    global_rounds: int = 100
    local_epochs: int = 3
    update_interval: int = 5
    lr: float = 1e-4
    batch_size: int = 16
    strategy: str = "fedlol"
    fedprox_mu: float = 0.1
    partial_update: bool = True
    seed: int = 0
    init_seed: int | None = None
    alpha: float = 0.5
    snr_train_db: float = 10.0
    fading: str = "none"
    eval_interval: int = 10
    eval_fraction: float = 0.1
    dataset: str = "synthetic"
    dataset_format: str = "packed-binary"
    num_classes: int = 10
    samples_per_class: int = 200
    checkpoint_every: int = 0
    workers: int = 1
    model: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self) -> None:
        checks = [
            (self.num_clients >= 2, "num_clients must be >= 2"),
            (self.global_rounds >= 1, "global_rounds must be >= 1"),
            (self.local_epochs >= 1, "local_epochs must be >= 1"),
            (self.update_interval >= 1, "update_interval must be >= 1"),
            (self.lr >= 0 and math.isfinite(self.lr), "lr must be finite and >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
            (self.fedprox_mu >= 0, "fedprox_mu must be >= 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (math.isfinite(self.snr_train_db), "snr_train_db must be finite"),
            (self.fading in ch.FADING_MODES, f"fading must be one of {ch.FADING_MODES}"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (0 < self.eval_fraction < 1, "eval_fraction must lie in (0, 1)"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def label(self) -> str:
        if self.strategy == "centralized":
            return "centralized"
        return f"{self.strategy}-{'partial' if self.partial_update else 'full'}"

    @property
    def channel(self) -> ch.ChannelConfig:
        return ch.ChannelConfig(self.snr_train_db, self.fading, self.seed)


# --------------------------------------------------------------------------
# transmission schedule


def broadcast_groups(round_t: int, interval: int, partial_update: bool) -> frozenset[str]:
    """Groups the server sends at the start of round ``round_t`` (1-based)."""
    if round_t < 1:
        raise ValueError(f"rounds are numbered from 1, got {round_t}")
    if not partial_update or round_t % interval == 1 % interval:
        return ALL_GROUPS
    return SEMANTIC_GROUPS


def upload_groups(round_t: int, interval: int, partial_update: bool) -> frozenset[str]:
    """Groups each client sends back at the end of round ``round_t``."""
    if round_t < 1:
        raise ValueError(f"rounds are numbered from 1, got {round_t}")
    if not partial_update or round_t % interval == 0:
        return ALL_GROUPS
    return SEMANTIC_GROUPS


@dataclass(frozen=True)
class RoundPayload:
    params: ParamVector
    groups: frozenset[str]
    loss: float
    bytes: int

    @classmethod
    def build(cls, params: ParamVector, groups: frozenset[str], loss: float = 0.0) -> RoundPayload:
        return cls(params, frozenset(groups), float(loss), byte_size(params.layout, groups))


# --------------------------------------------------------------------------
# communication ledger


@dataclass
class CommLedger:
    """Per-round byte totals, one entry per direction."""

    down: list[int] = field(default_factory=list)
    up: list[int] = field(default_factory=list)

    def record(self, down_payloads: Sequence[int], up_payloads: Sequence[int]) -> None:
        self.down.append(int(sum(down_payloads)))
        self.up.append(int(sum(up_payloads)))

    @property
    def rounds(self) -> int:
        return len(self.down)

    @property
    def total_down(self) -> int:
        return sum(self.down)

    @property
    def total_up(self) -> int:
        return sum(self.up)


def schedule_ledger(layout: GroupLayout, rounds: int, interval: int, partial_update: bool, num_clients: int) -> CommLedger:
    """Ledger of a run's traffic from the schedule alone, without training."""
    ledger = CommLedger()
    for t in range(1, rounds + 1):
        down = byte_size(layout, broadcast_groups(t, interval, partial_update))
        up = byte_size(layout, upload_groups(t, interval, partial_update))
        ledger.record([down] * num_clients, [up] * num_clients)
    return ledger


@dataclass(frozen=True)
class LedgerSummary:
    rounds: int
    total_down: int
    total_up: int
    mean_down: float
    mean_up: float
    full_per_round: float  # both directions, every group every round
    reduction: float  # fraction of full-update traffic saved

    @property
    def reduction_percent(self) -> float:
        return 100.0 * self.reduction


def ledger_summary(ledger: CommLedger, layout: GroupLayout, num_clients: int) -> LedgerSummary:
    if ledger.rounds == 0:
        raise ValueError("ledger is empty")
    full = 2.0 * num_clients * byte_size(layout, ALL_GROUPS)
    mean_down = ledger.total_down / ledger.rounds
    mean_up = ledger.total_up / ledger.rounds
    return LedgerSummary(
        rounds=ledger.rounds,
        total_down=ledger.total_down,
        total_up=ledger.total_up,
        mean_down=mean_down,
        mean_up=mean_up,
        full_per_round=full,
        reduction=1.0 - (mean_down + mean_up) / full,
    )


# --------------------------------------------------------------------------
# aggregation weights


def fedlol_weights(losses: Sequence[float], num_clients: int | None = None) -> np.ndarray:
    """Loss-inverse weights ``(sum(L) - L_k) / ((K - 1) * sum(L))``."""
    L = np.asarray(losses, dtype=np.float64)
    k = len(L) if num_clients is None else num_clients
    if k != len(L):
        raise ValueError(f"{len(L)} losses for {k} clients")
    if k == 1:
        return np.ones(1)
    if not np.all(np.isfinite(L)) or np.any(L <= 0):
        raise DegenerateLossError(f"FedLol needs positive finite losses, got {L.tolist()}")
    total = L.sum()
    return (total - L) / ((k - 1) * total)


def fedavg_weights(sample_counts: Sequence[int]) -> np.ndarray:
    d = np.asarray(sample_counts, dtype=np.float64)
    if np.any(d < 0) or d.sum() <= 0:
        raise ValueError("sample counts must be non-negative with a positive total")
    return d / d.sum()


def aggregate(uploads: Sequence[RoundPayload], weights: Sequence[float], prev_global: ParamVector) -> ParamVector:
    """Weighted sum of the uploaded groups; untransmitted groups keep ``prev_global``."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    groups = uploads[0].groups
    if any(u.groups != groups for u in uploads):
        raise ProtocolError("clients uploaded different group sets in one round")
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {w.sum()!r}, not 1")
    # Centred on the first upload: algebraically the plain weighted sum, but
    # exact when every client returns the same parameters.
    ref = uploads[0].params
    deltas = [ParamVector(u.params.values - ref.values, ref.layout) for u in uploads]
    combined = ParamVector(ref.values + weighted_sum(deltas, w).values, ref.layout)
    return overwrite_groups(prev_global, combined, groups)


# --------------------------------------------------------------------------
# local training


def fedprox_local_step(
    params: ParamVector, grad: ParamVector, global_params: ParamVector, mu: float, lr: float
) -> ParamVector:
    """SGD on the loss plus ``mu/2 * ||params - global_params||^2``."""
    if params.layout != grad.layout or params.layout != global_params.layout:
        raise LayoutError("fedprox step on mismatched layouts")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    g = grad.values + mu * (params.values - global_params.values)
    return ParamVector(params.values - lr * g, params.layout)


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    params: ParamVector
    last_loss: float = math.nan

    @property
    def num_samples(self) -> int:
        return len(self.indices)


def local_train(
    model: SemComModel,
    client: ClientState,
    received: RoundPayload,
    cfg: RunConfig,
    dataset: Dataset,
    round_t: int,
) -> tuple[ParamVector, float]:
    """Synchronize with ``received`` and run ``cfg.local_epochs`` epochs of SGD.

    Returns the new local parameters and the sample-weighted mean training loss
    of the last epoch, which is what the client reports to the server.
    """
    params = overwrite_groups(client.params, received.params, received.groups)
    anchor = params
    batch_rng = np.random.default_rng([cfg.seed, _STREAM_BATCHES, client.client_id, round_t])
    chan_rng = np.random.default_rng([cfg.seed, _STREAM_CHANNEL, client.client_id, round_t])
    channel_fn = make_channel_fn(cfg.channel, chan_rng)
    epoch_loss = math.nan
    for _ in range(cfg.local_epochs):
        total, count = 0.0, 0
        for idx in batch_iter(dataset, client.indices, cfg.batch_size, batch_rng):
            images = dataset.images[idx]
            try:
                loss, grad = model.loss_and_grad(params, images, cfg.snr_train_db, channel_fn)
                if not math.isfinite(loss):
                    raise LayoutError(f"loss={loss}")
                if cfg.strategy == "fedprox":
                    params = fedprox_local_step(params, grad, anchor, cfg.fedprox_mu, cfg.lr)
                elif cfg.lr > 0:
                    params = sgd_step(params, grad, cfg.lr)
            except LayoutError as exc:
                # non-finite loss, gradient or updated parameters
                raise DivergenceError(
                    f"client {client.client_id} diverged in round {round_t} ({exc})",
                    client_id=client.client_id,
                    round_t=round_t,
                ) from exc
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / count
    return params, epoch_loss


# --------------------------------------------------------------------------
# checkpoints

_CKPT = struct.Struct("<4sIQ")
CKPT_MAGIC = b"FSCK"


def save_checkpoint(path: str | Path, params: ParamVector, round_t: int) -> None:
    """Little-endian record: magic, u32 round, u64 count, f64 values."""
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(CKPT_MAGIC, round_t, len(params)))
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, layout: GroupLayout) -> tuple[ParamVector, int]:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT.size:
        raise ConfigError(f"{path}: truncated checkpoint")
    magic, round_t, n = _CKPT.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (magic {magic!r})")
    if n != layout.total_length or len(blob) != _CKPT.size + 8 * n:
        raise ConfigError(f"{path}: holds {n} values, model needs {layout.total_length}")
    values = np.frombuffer(blob, dtype="<f8", count=n, offset=_CKPT.size)
    return ParamVector(values, layout), round_t


# --------------------------------------------------------------------------
# evaluation and the training loop


def evaluate(
    model: SemComModel,
    params: ParamVector,
    eval_set: Dataset,
    snr_db: float,
    fading: str,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> tuple[float, float, float, int]:
    """Mean (loss, PSNR, MS-SSIM) of the model over ``eval_set`` and the MS-SSIM scale count."""
    channel_fn = make_channel_fn(ch.ChannelConfig(snr_db, fading), rng)
    recon = []
    for start in range(0, len(eval_set), batch_size):
        imgs = eval_set.images[start : start + batch_size]
        out, _ = model.forward(params, imgs, snr_db, channel_fn)
        recon.append(out)
    recon = np.concatenate(recon)
    loss = float(np.mean((recon - eval_set.images) ** 2))
    p, s, scales = batch_quality(eval_set.images, recon)
    return loss, p, s, scales


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        full = synthetic_dataset(cfg.num_classes, cfg.samples_per_class, cfg.model.image_shape, cfg.seed)
    else:
        full = load_dataset(cfg.dataset, cfg.dataset_format)
        if full.image_shape != tuple(cfg.model.image_shape):
            raise ConfigError(f"dataset images are {full.image_shape}, model expects {cfg.model.image_shape}")
    return holdout_split(full, cfg.eval_fraction, cfg.seed)


def make_partition(cfg: RunConfig, train: Dataset) -> dict[int, list[int]]:
    rng = np.random.default_rng([cfg.seed, _STREAM_PARTITION])
    return dirichlet_partition(train.labels, cfg.num_clients, cfg.alpha, rng)


def _client_weights(cfg: RunConfig, clients: Sequence[ClientState], losses: Sequence[float], report: TrainingReport) -> np.ndarray:
    if cfg.strategy == "fedlol":
        try:
            return fedlol_weights(losses, len(clients))
        except DegenerateLossError as exc:
            warnings.warn(f"{exc}; falling back to uniform weights", RuntimeWarning, stacklevel=2)
            report.fallbacks += 1
            return np.full(len(clients), 1.0 / len(clients))
    return fedavg_weights([c.num_samples for c in clients])


def run_training(
    cfg: RunConfig,
    data: tuple[Dataset, Dataset] | None = None,
    csv_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainingReport:
    """Run ``cfg.global_rounds`` rounds and return the per-round report.

    If ``csv_path`` is given, rows are appended as they are produced so an
    aborted run still leaves a partial report behind.
    """
    train, eval_set = data if data is not None else prepare_data(cfg)
    model = SemComModel(cfg.model)
    partition = make_partition(cfg, train)
    init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    global_params = model.init_params(init_seed)
    report = TrainingReport(csv_path=csv_path)
    report.partition = partition
    report.msssim_scales = None
    try:
        if cfg.strategy == "centralized":
            global_params = _run_centralized(cfg, model, train, eval_set, partition, global_params, report, checkpoint_dir)
        else:
            global_params = _run_federated(cfg, model, train, eval_set, partition, global_params, report, checkpoint_dir)
    finally:
        report.close()
    report.final_params = global_params
    return report


def _eval_row(cfg, model, params, eval_set, round_t, report):
    if round_t % cfg.eval_interval and round_t != cfg.global_rounds:
        return None, None
    rng = np.random.default_rng([cfg.seed, _STREAM_EVAL, round_t])
    _, p, s, scales = evaluate(model, params, eval_set, cfg.snr_train_db, cfg.fading, rng)
    report.msssim_scales = scales
    return p, s


def _maybe_checkpoint(cfg, checkpoint_dir, params, round_t):
    if checkpoint_dir is None or not cfg.checkpoint_every:
        return
    if round_t % cfg.checkpoint_every == 0 or round_t == cfg.global_rounds:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(checkpoint_dir) / f"{cfg.label}_round{round_t:04d}.ckpt", params, round_t)


def _run_federated(cfg, model, train, eval_set, partition, global_params, report, checkpoint_dir):
    clients = [
        ClientState(k, np.asarray(partition[k], dtype=np.int64), global_params)
        for k in range(cfg.num_clients)
    ]
    layout = model.layout
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.global_rounds + 1):
            down_groups = broadcast_groups(t, cfg.update_interval, cfg.partial_update)
            received = RoundPayload.build(global_params, down_groups)

            def work(client: ClientState) -> tuple[ParamVector, float]:
                return local_train(model, client, received, cfg, train, t)

            results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]

            up_groups = upload_groups(t, cfg.update_interval, cfg.partial_update)
            uploads = []
            for client, (params, loss) in zip(clients, results):
                client.params, client.last_loss = params, loss
                uploads.append(RoundPayload.build(params, up_groups, loss))
            losses = [u.loss for u in uploads]
            weights = _client_weights(cfg, clients, losses, report)
            global_params = aggregate(uploads, weights, global_params)
            report.ledger.record([received.bytes] * len(clients), [u.bytes for u in uploads])

            p, s = _eval_row(cfg, model, global_params, eval_set, t, report)
            report.append(
                ReportRow(
                    round=t,
                    strategy=cfg.label,
                    snr_db=cfg.snr_train_db,
                    train_loss=float(np.mean(losses)),
                    eval_psnr_db=p,
                    eval_msssim=s,
                    bytes_down=report.ledger.down[-1],
                    bytes_up=report.ledger.up[-1],
                )
            )
            _maybe_checkpoint(cfg, checkpoint_dir, global_params, t)
            log.debug("round %d loss %.6f psnr %s", t, np.mean(losses), p)
    finally:
        if pool:
            pool.shutdown()
    report.layout = layout
    return global_params


def step_budget(cfg: RunConfig, partition: dict[int, list[int]]) -> int:
    """SGD steps one federated round spends across all clients."""
    per_round = sum(math.ceil(len(v) / cfg.batch_size) for v in partition.values())
    return cfg.local_epochs * per_round


def _run_centralized(cfg, model, train, eval_set, partition, params, report, checkpoint_dir):
    pooled = np.asarray(sorted(i for v in partition.values() for i in v), dtype=np.int64)
    per_round = step_budget(cfg, partition)
    rng = np.random.default_rng([cfg.seed, _STREAM_CENTRAL])
    channel_fn = make_channel_fn(cfg.channel, np.random.default_rng([cfg.seed, _STREAM_CENTRAL, 1]))
    batches = iter(())
    for t in range(1, cfg.global_rounds + 1):
        total, count = 0.0, 0
        for _ in range(per_round):
            idx = next(batches, None)
            if idx is None:
                batches = batch_iter(train, pooled, cfg.batch_size, rng)
                idx = next(batches)
            try:
                loss, grad = model.loss_and_grad(params, train.images[idx], cfg.snr_train_db, channel_fn)
                if not math.isfinite(loss):
                    raise LayoutError(f"loss={loss}")
                if cfg.lr > 0:
                    params = sgd_step(params, grad, cfg.lr)
            except LayoutError as exc:
                raise DivergenceError(f"centralized training diverged in round {t} ({exc})", round_t=t) from exc
            total += loss * len(idx)
            count += len(idx)
        report.ledger.record([0], [0])
        p, s = _eval_row(cfg, model, params, eval_set, t, report)
        report.append(
            ReportRow(t, cfg.label, cfg.snr_train_db, total / count, p, s, 0, 0)
        )
        _maybe_checkpoint(cfg, checkpoint_dir, params, t)
    report.layout = model.layout
    return params


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
