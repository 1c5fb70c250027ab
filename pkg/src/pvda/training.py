"""Progressive adversarial training.

Each iteration runs two steps on the same batch:

1. encoder and classifier fixed, discriminator minimises the view loss;
2. discriminator fixed, encoder + classifier minimise
   ``location_loss + alpha * adversarial_loss``.

``alpha`` grows every ``alpha_period_epochs`` and the learning rates restart
at each increase (warm restart), decaying by ``lr_decay_factor`` at fixed
epochs inside each cycle.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .config import PARAM_GROUPS, ConfigError, ExperimentConfig, ScheduleConfig, Variant
from .dataset import Dataset, sample_batch_indices
from .encoder import FeatureEncoder
from .heads import LocationClassifier, ViewDiscriminator
from .losses import LossReport, adversarial_loss, combined_loss, location_loss, view_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pvda-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = [
    "epoch", "step", "loss_location", "loss_view", "loss_adversarial", "loss_combined",
    "loss_location_mean", "loss_view_mean", "loss_adversarial_mean", "loss_combined_mean",
    "alpha", *(f"lr_{g}" for g in PARAM_GROUPS),
]


class TrainingError(RuntimeError):
    """Unrecoverable failure inside the training loop."""


# ---------------------------------------------------------------------------
# schedules

def alpha_at(epoch: int, cfg: ScheduleConfig) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if cfg.variant is Variant.CONSTANT_ALPHA:
        alpha = cfg.alpha_init
    else:
        alpha = cfg.alpha_init + cfg.alpha_step * (epoch // cfg.alpha_period_epochs)
    if cfg.max_alpha is not None:
        alpha = min(alpha, cfg.max_alpha)
    return alpha


def lr_at(epoch: int, group: str, cfg: ScheduleConfig) -> float:
    if group not in cfg.base_lrs:
        raise ConfigError(f"unknown parameter group {group!r}")
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    base = cfg.base_lrs[group]
    if group == "discriminator" and not cfg.restart_discriminator_lr:
        return base
    if cfg.variant is Variant.NO_RESTART:
        n_decays = epoch // cfg.alpha_period_epochs
    else:
        e = epoch % cfg.alpha_period_epochs
        n_decays = sum(1 for d in cfg.lr_decay_epochs_within_cycle if e >= d)
    return base * cfg.lr_decay_factor ** n_decays


# ---------------------------------------------------------------------------
# model and state

class PVDAModel(nn.Module):
    def __init__(self, encoder: FeatureEncoder, classifier: LocationClassifier,
                 discriminator: ViewDiscriminator | None):
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier
        self.discriminator = discriminator


def build_model(cfg: ExperimentConfig, num_locations: int, seed: int) -> PVDAModel:
    """Each module draws its init from its own seed, so dropping the discriminator
    does not perturb the encoder/classifier initialisation or later dropout masks."""
    torch.manual_seed(seed)
    encoder = FeatureEncoder(cfg.encoder)
    classifier = LocationClassifier(cfg.encoder.d_embed, num_locations, cfg.encoder.num_rings, cfg.heads.dropout)
    disc = None
    if cfg.train.use_discriminator:
        torch.manual_seed(seed + 1)
        hf = cfg.encoder.feature_size()
        disc = ViewDiscriminator(cfg.encoder.feature_channels, hf, cfg.heads)
    torch.manual_seed(seed + 2)
    return PVDAModel(encoder, classifier, disc)


@dataclass
class TrainState:
    model: PVDAModel
    sgd: torch.optim.SGD
    adam: torch.optim.Adam | None
    config: ExperimentConfig
    rng: np.random.Generator
    num_locations: int
    epoch: int = 0
    global_step: int = 0
    lr_scale: dict[str, float] = field(default_factory=lambda: {g: 1.0 for g in PARAM_GROUPS})
    incidents: list[dict[str, Any]] = field(default_factory=list)

    @property
    def schedule(self) -> ScheduleConfig:
        return self.config.schedule

    def alpha(self) -> float:
        return alpha_at(self.epoch, self.schedule)

    def current_lrs(self) -> dict[str, float]:
        return {g: lr_at(self.epoch, g, self.schedule) * self.lr_scale[g] for g in PARAM_GROUPS}

    def apply_lrs(self) -> dict[str, float]:
        lrs = self.current_lrs()
        opts = [self.sgd] + ([self.adam] if self.adam is not None else [])
        for opt in opts:
            for group in opt.param_groups:
                group["lr"] = lrs[group["name"]]
        return lrs


def init_state(cfg: ExperimentConfig, num_locations: int) -> TrainState:
    cfg.validate()
    seed = cfg.train.seed
    model = build_model(cfg, num_locations, seed)
    enc_groups = model.encoder.param_groups()
    sgd = torch.optim.SGD(
        [
            {"params": enc_groups["backbone"], "name": "backbone"},
            {"params": enc_groups["encoder_rest"], "name": "encoder_rest"},
            {"params": list(model.classifier.parameters()), "name": "classifier"},
        ],
        lr=cfg.schedule.base_lrs["classifier"],
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
    )
    adam = None
    if model.discriminator is not None:
        adam = torch.optim.Adam(
            [{"params": list(model.discriminator.parameters()), "name": "discriminator"}],
            lr=cfg.schedule.base_lrs["discriminator"],
            betas=tuple(cfg.train.adam_betas),
        )
    state = TrainState(model, sgd, adam, cfg, np.random.default_rng(seed), num_locations)
    state.apply_lrs()
    return state


# ---------------------------------------------------------------------------
# one iteration

def _record_incident(state: TrainState, step_name: str, groups: tuple[str, ...], value: float) -> None:
    if any(state.lr_scale[g] != 1.0 for g in groups):
        raise TrainingError(f"non-finite {step_name} loss ({value}) recurred after lr halving")
    for g in groups:
        state.lr_scale[g] *= 0.5
    state.incidents.append({"epoch": state.epoch, "step": state.global_step, "where": step_name, "value": value})
    log.warning("non-finite %s loss at epoch %d step %d; halving lr of %s",
                step_name, state.epoch, state.global_step, groups)
    state.apply_lrs()


def train_step(state: TrainState, images: torch.Tensor, views: torch.Tensor, labels: torch.Tensor,
               step2_batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None) -> LossReport:
    """One two-step iteration.  ``step2_batch`` replaces the batch for step 2 when given."""
    if not ((views == 0).any() and (views == 1).any()):
        raise ConfigError("training batch must contain both views")
    model = state.model
    model.train()
    alpha = state.alpha()
    bsz = images.shape[0]
    disc = model.discriminator

    maps, parts = model.encoder(images)

    # step 1: discriminator only
    lv = torch.zeros(())
    if disc is not None:
        disc.requires_grad_(True)
        state.adam.zero_grad(set_to_none=True)
        detached = maps.detach()
        for k in range(state.config.train.disc_steps):
            loss = view_loss(disc.probs(detached), views)
            if k == 0:
                lv = loss
            if not torch.isfinite(loss):
                _record_incident(state, "view", ("discriminator",), float(loss.detach()))
                break
            (loss / bsz).backward()
            state.adam.step()
            state.adam.zero_grad(set_to_none=True)

    # step 2: encoder + classifier, discriminator frozen
    if step2_batch is not None:
        images, views, labels = step2_batch
        bsz = images.shape[0]
        maps, parts = model.encoder(images)
    state.sgd.zero_grad(set_to_none=True)
    ll = location_loss(model.classifier.probs(parts), labels)
    la = torch.zeros(())
    if disc is not None:
        disc.requires_grad_(False)
        la = adversarial_loss(disc.probs(maps), views)
    lfl = combined_loss(ll, la, alpha)
    if torch.isfinite(lfl):
        (lfl / bsz).backward()
        state.sgd.step()
    else:
        _record_incident(state, "combined", ("backbone", "encoder_rest", "classifier"), float(lfl.detach()))
    state.sgd.zero_grad(set_to_none=True)
    if disc is not None:
        disc.requires_grad_(True)

    state.global_step += 1
    ll_f, la_f = float(ll.detach()), float(la.detach())
    return LossReport(ll_f, float(lv.detach()), la_f, ll_f + alpha * la_f, alpha, bsz)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, path: str | Path, metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "num_locations": state.num_locations,
        "model": state.model.state_dict(),
        "sgd": state.sgd.state_dict(),
        "adam": state.adam.state_dict() if state.adam is not None else None,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "np_rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "lr_scale": dict(state.lr_scale),
        "incidents": list(state.incidents),
        "metadata": {
            "pretrained_backbone": bool(getattr(state.model.encoder.backbone, "pretrained_loaded", False)),
            "momentum": state.config.train.momentum,
            "weight_decay": state.config.train.weight_decay,
            "adam_betas": list(state.config.train.adam_betas),
            **(metadata or {}),
        },
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a PVDA checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None) -> TrainState:
    """Rebuild a TrainState; ``cfg`` defaults to the stored config."""
    payload = read_checkpoint(path)
    stored = ExperimentConfig.from_dict(payload["config"])
    if cfg is None:
        cfg = stored
    elif cfg.hash() != payload["config_hash"]:
        log.warning("config hash %s differs from checkpoint %s", cfg.hash(), payload["config_hash"])
    # the backbone weights come from the checkpoint; skip any download
    cfg.encoder.pretrained = False
    state = init_state(cfg, payload["num_locations"])
    state.model.load_state_dict(payload["model"])
    state.sgd.load_state_dict(payload["sgd"])
    if state.adam is not None and payload["adam"] is not None:
        state.adam.load_state_dict(payload["adam"])
    state.epoch = payload["epoch"]
    state.global_step = payload["global_step"]
    state.rng.bit_generator.state = payload["np_rng"]
    torch.set_rng_state(payload["torch_rng"])
    state.lr_scale = dict(payload["lr_scale"])
    state.incidents = list(payload["incidents"])
    state.apply_lrs()
    return state


# ---------------------------------------------------------------------------
# epoch loop

class BatchSource:
    """Draws view-balanced batches (with optional horizontal flips) from a dataset."""

    def __init__(self, dataset: Dataset, batch_size: int, flip: bool):
        self.dataset = dataset
        self.batch_size = batch_size
        self.flip = flip
        self.views = torch.from_numpy(dataset.views)
        self.labels = torch.from_numpy(dataset.labels)
        self.cached = None
        if all(s.pixels is not None for s in dataset.samples):
            self.cached = dataset.images()

    def draw(self, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = sample_batch_indices(self.dataset, self.batch_size, rng)
        images = self.cached[idx] if self.cached is not None else self.dataset.images(idx)
        if self.flip:
            mask = torch.from_numpy(rng.random(len(idx)) < 0.5)
            images = torch.where(mask[:, None, None, None], images.flip(-1), images)
        t = torch.from_numpy(idx)
        return images, self.views[t], self.labels[t]


def _fmt(x: float) -> str:
    return repr(float(x))


def _log_row(epoch: int, step: int, rep: LossReport, lrs: dict[str, float]) -> list[str]:
    return [
        str(epoch), str(step), _fmt(rep.location_loss), _fmt(rep.view_loss), _fmt(rep.adversarial_loss),
        _fmt(rep.combined), _fmt(rep.location_mean), _fmt(rep.view_mean), _fmt(rep.adversarial_mean),
        _fmt(rep.combined_mean), _fmt(rep.alpha), *(_fmt(lrs[g]) for g in PARAM_GROUPS),
    ]


def _open_log(path: Path, cfg: ExperimentConfig, resume_epoch: int | None):
    kept: list[str] = []
    if resume_epoch is not None and path.exists():
        for line in path.read_text().splitlines():
            if line.startswith("#") or line.startswith("epoch,"):
                continue
            if int(line.split(",", 1)[0]) < resume_epoch:
                kept.append(line)
    fh = path.open("w", newline="")
    fh.write(f"# variant={cfg.schedule.variant.value} seed={cfg.train.seed} config_hash={cfg.hash()}\n")
    fh.write(",".join(LOG_COLUMNS) + "\n")
    for line in kept:
        fh.write(line + "\n")
    return fh


def read_log(path: str | Path) -> list[dict[str, float]]:
    with open(path) as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [{k: float(v) for k, v in r.items()} for r in rows]


def train(cfg: ExperimentConfig, out_dir: str | Path, train_set: Dataset,
          resume: str | Path | None = None) -> Path:
    """Run ``cfg.train.epochs`` epochs; returns the final checkpoint path.

    Writes ``train_log.csv`` and ``checkpoints/`` under ``out_dir``.  With
    ``resume`` the run continues from that checkpoint's epoch and reproduces
    the uninterrupted run bit for bit.
    """
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume, cfg)
        if state.num_locations != train_set.num_locations:
            raise ConfigError("checkpoint classifier size does not match the training set")
    else:
        state = init_state(cfg, train_set.num_locations)
    source = BatchSource(train_set, cfg.train.batch_size, cfg.data.flip)
    steps = cfg.train.steps_per_epoch or math.ceil(len(train_set) / cfg.train.batch_size)

    fh = _open_log(out / "train_log.csv", cfg, state.epoch if resume is not None else None)
    writer = csv.writer(fh, lineterminator="\n")
    try:
        while state.epoch < cfg.train.epochs:
            lrs = state.apply_lrs()
            for step in range(steps):
                batch = source.draw(state.rng)
                second = source.draw(state.rng) if not cfg.train.same_batch else None
                rep = train_step(state, *batch, step2_batch=second)
                writer.writerow(_log_row(state.epoch, step, rep, lrs))
                lrs = state.current_lrs()
            fh.flush()
            state.epoch += 1
            every = cfg.train.checkpoint_every
            if every and state.epoch % every == 0 and state.epoch < cfg.train.epochs:
                save_checkpoint(state, ckpt_dir / f"epoch_{state.epoch:04d}.pt")
    finally:
        fh.close()
    final = save_checkpoint(state, ckpt_dir / f"epoch_{state.epoch:04d}.pt")
    shutil.copyfile(final, ckpt_dir / "final.pt")
    if state.incidents:
        (out / "incidents.json").write_text(json.dumps(state.incidents, indent=2))
    return ckpt_dir / "final.pt"
