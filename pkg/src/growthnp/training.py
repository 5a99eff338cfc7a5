"""Minibatch training loop, checkpoints and deterministic resumption."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .data import (
    MAX_CONTEXT,
    MIN_CONTEXT,
    ContextTargetBatch,
    Trajectory,
    augment_batch,
    sample_context_target,
)
from .model import GrowthNP, ModelConfig
from .objective import LossConfig, training_objective

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOSS_COLUMNS = ("epoch", "ce", "dice", "kl", "total")


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    # Context/target draws per trajectory per epoch.
    samples_per_trajectory: int = 1
    augment: bool = True
    checkpoint_every: int = 0
    # Global gradient-norm clip; 0 disables.
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "samples_per_trajectory"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.grad_clip_norm < 0:
            raise ValueError(f"grad_clip_norm must be non-negative, got {self.grad_clip_norm}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized preset: batch 16, a few hundred Adam steps at a larger step size."""
        base = dict(epochs=50, learning_rate=1e-3, batch_size=16, samples_per_trajectory=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    step: int
    epoch: int
    model_config: ModelConfig
    train_config: TrainConfig
    loss_config: LossConfig
    rng_state: dict
    loss_log: list[dict] = field(default_factory=list)

    def build_model(self) -> GrowthNP:
        model = GrowthNP(self.model_config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "loss_config": dataclasses.asdict(ckpt.loss_config),
        "rng_state": ckpt.rng_state,
        "loss_log": ckpt.loss_log,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Path, expected_model_config: Optional[ModelConfig] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {payload['format_version']} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    model_config = ModelConfig.from_dict(payload["model_config"])
    if expected_model_config is not None and expected_model_config != model_config:
        diff = {
            k: (v, getattr(expected_model_config, k))
            for k, v in model_config.to_dict().items()
            if expected_model_config.to_dict()[k] != v
        }
        raise CheckpointError(f"{path}: model config mismatch (stored, expected): {diff}")
    lc = dict(payload["loss_config"])
    if lc.get("class_weights") is not None:
        lc["class_weights"] = tuple(lc["class_weights"])
    return Checkpoint(
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        step=payload["step"],
        epoch=payload["epoch"],
        model_config=model_config,
        train_config=TrainConfig(**payload["train_config"]),
        loss_config=LossConfig(**lc),
        rng_state=payload["rng_state"],
        loss_log=list(payload["loss_log"]),
    )


def collate(batches: Sequence[ContextTargetBatch], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Stack equally sized context/target splits into [B, N, ...] tensors."""
    sizes = {(len(b.context), len(b.target)) for b in batches}
    if len(sizes) != 1:
        raise ValueError(f"batches must share context/target sizes, got {sorted(sizes)}")

    def stack(obs_lists):
        images = np.stack([np.stack([o.image for o in obs]) for obs in obs_lists])
        segs = np.stack([np.stack([o.segmentation for o in obs]) for obs in obs_lists])
        times = np.array([[o.time for o in obs] for obs in obs_lists])
        return (
            torch.from_numpy(images).to(dtype),
            torch.from_numpy(segs.astype(np.int64)),
            torch.from_numpy(times).to(dtype),
        )

    ci, cs, ct = stack([b.context for b in batches])
    ti, ts, tt = stack([b.target for b in batches])
    return dict(
        ctx_images=ci, ctx_segs=cs, ctx_times=ct, tgt_images=ti, tgt_segs=ts, tgt_times=tt
    )


def loss_step(model: GrowthNP, tensors: dict, loss_config: LossConfig, generator=None, eps=None):
    """Objective over the target set (context absorbed into targets)."""
    logits, posterior, prior = model(**tensors, eps=eps, generator=generator)
    labels = torch.cat([tensors["ctx_segs"], tensors["tgt_segs"]], dim=1)
    return training_objective(logits, labels, posterior, prior, loss_config)


def _epoch_batches(
    train_set: Sequence[Trajectory], cfg: TrainConfig, rng: np.random.Generator
) -> Iterable[list[ContextTargetBatch]]:
    order = np.repeat(np.arange(len(train_set)), cfg.samples_per_trajectory)
    rng.shuffle(order)
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        k = int(rng.integers(MIN_CONTEXT, MAX_CONTEXT + 1))
        k = min(k, min(len(train_set[i]) for i in idx) - 1)
        batch = []
        for i in idx:
            b = sample_context_target(train_set[i], k, "train", rng)
            if cfg.augment:
                b = augment_batch(b, rng)
            batch.append(b)
        yield batch


def _rng_state(np_rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state, "torch": gen.get_state()}


def _restore_rng(state: dict) -> tuple[np.random.Generator, torch.Generator]:
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = state["numpy"]
    gen = torch.Generator()
    gen.set_state(state["torch"])
    return np_rng, gen


def write_loss_log(rows: Sequence[dict], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOSS_COLUMNS})


def read_loss_log(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


def train(
    train_set: Sequence[Trajectory],
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_config: LossConfig = LossConfig(),
    run_dir: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
    forbidden_subjects: Iterable[str] = (),
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> tuple[GrowthNP, Checkpoint]:
    """Train from scratch (or continue ``resume``) for ``train_config.epochs`` epochs.

    Returns the trained model and a checkpoint at the final epoch. When
    ``run_dir`` is set, ``loss_log.csv`` and ``checkpoints/last.pt`` are
    kept up to date after every epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    leaked = {t.subject_id for t in train_set} & set(forbidden_subjects)
    if leaked:
        raise ValueError(f"test subjects found in the training set: {sorted(leaked)}")

    torch.manual_seed(train_config.seed)
    model = GrowthNP(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    if resume is not None:
        if resume.model_config != model_config:
            raise CheckpointError("resume checkpoint was trained with a different model config")
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        np_rng, gen = _restore_rng(resume.rng_state)
        step, start_epoch, log = resume.step, resume.epoch, list(resume.loss_log)
    else:
        np_rng = np.random.default_rng(train_config.seed)
        gen = torch.Generator().manual_seed(train_config.seed)
        step, start_epoch, log = 0, 0, []

    ckpt = None
    for epoch in range(start_epoch + 1, train_config.epochs + 1):
        model.train()
        sums = {"ce": 0.0, "dice": 0.0, "kl": 0.0, "total": 0.0}
        n_batches = 0
        for bi, batch in enumerate(_epoch_batches(train_set, train_config, np_rng)):
            losses = loss_step(model, collate(batch), loss_config, generator=gen)
            values = losses.as_floats()
            if not np.all(np.isfinite(list(values.values()))):
                raise NonFiniteLossError(
                    f"non-finite loss at step {step} (epoch {epoch}, batch {bi}, "
                    f"subjects {[b.subject_id for b in batch]}): {values}"
                )
            optimizer.zero_grad()
            losses.total.backward()
            if train_config.grad_clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip_norm)
            optimizer.step()
            step += 1
            n_batches += 1
            for k in sums:
                sums[k] += values[k]
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        log.append(row)
        logger.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if on_epoch is not None:
            on_epoch(row)

        ckpt = Checkpoint(
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state=copy.deepcopy(optimizer.state_dict()),
            step=step,
            epoch=epoch,
            model_config=model_config,
            train_config=train_config,
            loss_config=loss_config,
            rng_state=_rng_state(np_rng, gen),
            loss_log=list(log),
        )
        if run_dir is not None:
            run_dir = Path(run_dir)
            write_loss_log(log, run_dir / "loss_log.csv")
            save_checkpoint(ckpt, run_dir / "checkpoints" / "last.pt")
            every = train_config.checkpoint_every
            if every and epoch % every == 0:
                save_checkpoint(ckpt, run_dir / "checkpoints" / f"epoch_{epoch:04d}.pt")

    if ckpt is None:
        if resume is None:
            raise ValueError("no epochs to run")
        ckpt = resume
    model.eval()
    return model, ckpt
