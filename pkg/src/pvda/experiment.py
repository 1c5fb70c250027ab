"""Glue for runs: build datasets from a config, train, evaluate, probe, ablate."""

from __future__ import annotations

import csv
import json
import logging
import platform
import statistics
import subprocess
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import copy

import torch

from . import __version__
from .config import ExperimentConfig, Variant
from .dataset import Dataset, LoadReport, Split, View, generate_toy_dataset, load_university1652
from .probe import pooled_feature_maps, view_probe_accuracy
from .retrieval import PROTOCOLS, Evaluation, OracleEncoder, evaluate, write_metrics
from .training import load_checkpoint, train

log = logging.getLogger(__name__)

VARIANTS = (Variant.PVDA, Variant.CONSTANT_ALPHA, Variant.NO_RESTART)


@dataclass
class DataBundle:
    train: Dataset
    query_uav: Dataset
    gallery_sat: Dataset
    query_sat: Dataset
    gallery_uav: Dataset

    def pair(self, protocol: str) -> tuple[Dataset, Dataset]:
        if protocol == "sat_uav":
            return self.query_sat, self.gallery_uav
        return self.query_uav, self.gallery_sat


def build_datasets(cfg: ExperimentConfig, report_path: str | Path | None = None) -> DataBundle:
    if cfg.data.source == "toy":
        toy = replace(cfg.toy, image_size=cfg.data.image_size)
        train_set, query, gallery = generate_toy_dataset(toy)
        query_locs = {s.location_id for s in query.samples}
        query_sat = Dataset([s for s in gallery.samples if s.location_id in query_locs],
                            gallery.num_locations, Split.QUERY)
        gallery_uav = Dataset(list(query.samples), query.num_locations, Split.GALLERY)
        return DataBundle(train_set, query, gallery, query_sat, gallery_uav)
    report = LoadReport()
    root, size = cfg.data.root, cfg.data.image_size
    bundle = DataBundle(
        load_university1652(root, "train", size, report),
        load_university1652(root, "query_drone", size, report),
        load_university1652(root, "gallery_satellite", size, report),
        load_university1652(root, "query_satellite", size, report),
        load_university1652(root, "gallery_drone", size, report),
    )
    if report_path is not None:
        report.write(report_path)
    return bundle


def code_version() -> str:
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+{sha}" if sha else __version__


def write_manifest(out_dir: str | Path, cfg: ExperimentConfig, command: str, argv: list[str] | None = None,
                   extra: dict[str, Any] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv if argv is not None else sys.argv,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def evaluate_encoder(encoder, data: DataBundle, protocols=PROTOCOLS, batch_size: int = 64) -> dict[str, Evaluation]:
    out = {}
    for proto in protocols:
        query, gallery = data.pair(proto)
        out[proto] = evaluate(encoder, query, gallery, proto, batch_size)
    return out


def load_encoder(checkpoint: str | Path):
    if str(checkpoint) == "oracle":
        return OracleEncoder()
    return load_checkpoint(checkpoint).model.encoder


def view_probe(encoder, data: DataBundle, seed: int = 0) -> float:
    """Balanced view accuracy of a linear probe fit on train maps, scored on the unseen eval images."""
    held_out = Dataset(data.query_uav.samples + data.gallery_sat.samples,
                       data.query_uav.num_locations, Split.QUERY)
    return view_probe_accuracy(
        pooled_feature_maps(encoder, data.train), data.train.views,
        pooled_feature_maps(encoder, held_out), held_out.views, seed,
    )


def no_adversary(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same run with the adversarial weight pinned to zero."""
    cfg = copy.deepcopy(cfg)
    cfg.schedule.alpha_init = 0.0
    cfg.schedule.alpha_step = 0.0
    return cfg


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    cfg.train.seed = seed
    cfg.toy.seed = seed
    return cfg


def trial(cfg: ExperimentConfig, out_dir: str | Path, protocols=("uav_sat_single", "uav_sat_multi"),
          probe: bool = True) -> dict[str, Any]:
    """Train on the config's data, then evaluate (and optionally probe) the final encoder."""
    out = Path(out_dir)
    data = build_datasets(cfg)
    ckpt = train(cfg, out, data.train)
    encoder = load_checkpoint(ckpt).model.encoder
    evals = evaluate_encoder(encoder, data, protocols, cfg.eval.batch_size)
    row: dict[str, Any] = {"seed": cfg.train.seed, "variant": cfg.schedule.variant.value,
                           "alpha_init": cfg.schedule.alpha_init, "checkpoint": str(ckpt)}
    for proto, ev in evals.items():
        write_metrics(ev, out / "eval", topk=0)
        for k in ("R@1", "R@5", "R@10", "AP"):
            row[f"{proto}/{k}"] = ev.report[k]
    if probe:
        row["view_probe"] = view_probe(encoder, data, cfg.train.seed)
    (out / "trial.json").write_text(json.dumps(row, indent=2))
    return row


ABLATION_METRICS = ("R@1", "R@5", "R@10", "AP")


def run_ablation(cfg: ExperimentConfig, out_dir: str | Path, seeds: list[int],
                 variants=VARIANTS, protocol: str = "uav_sat_single") -> list[dict[str, Any]]:
    """Train every schedule variant under identical seeds and data; write per-seed and summary tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for variant in variants:
        for seed in seeds:
            run_cfg = with_seed(cfg, seed)
            run_cfg.schedule.variant = variant
            row = trial(run_cfg, out / variant.value / f"seed_{seed}", protocols=(protocol,), probe=False)
            per_seed.append(row)
    summary = []
    for variant in variants:
        rows = [r for r in per_seed if r["variant"] == variant.value]
        entry: dict[str, Any] = {"variant": variant.value, "num_seeds": len(rows)}
        for k in ABLATION_METRICS:
            entry[k] = statistics.median(r[f"{protocol}/{k}"] for r in rows)
        summary.append(entry)
    with open(out / "ablation_per_seed.csv", "w", newline="") as fh:
        cols = ["variant", "seed", *(f"{protocol}/{k}" for k in ABLATION_METRICS)]
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(per_seed)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "num_seeds", *ABLATION_METRICS], lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    meta = {"seeds": list(seeds), "protocol": protocol, "statistic": "median over seeds",
            "config_hash": cfg.hash(), "variants": [v.value for v in variants]}
    (out / "ablation_meta.json").write_text(json.dumps(meta, indent=2))
    return summary
