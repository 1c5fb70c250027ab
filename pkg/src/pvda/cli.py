"""Command-line entry point: ``pvda {train,eval,ablate,toygen,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, full_profile, load_config, parse_override_list, toy_profile
from .dataset import DatasetError, generate_toy_dataset, write_university1652_tree

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("pvda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which we reserve for data errors
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--override", action="append", default=[], metavar="K=V", help="repeatable config override")
    p.add_argument("--seed", type=int, help="sets both the training and the toy-data seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", choices=["256", "384", "toy"], default="toy")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint path, or 'oracle' for the label oracle")
    p.add_argument("--protocol", action="append", choices=["uav_sat_single", "uav_sat_multi", "sat_uav"])

    p = sub.add_parser("ablate", help="compare the three schedule variants")
    _common(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--protocol", action="append", choices=["uav_sat_single", "uav_sat_multi", "sat_uav"])

    p = sub.add_parser("toygen", help="write the synthetic dataset as a University-1652 style tree")
    _common(p)

    p = sub.add_parser("report", help="summarise metrics JSON files under a directory")
    p.add_argument("--out", required=True, help="directory to scan; the summary is written here")
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = toy_profile() if args.image_size == "toy" else full_profile(int(args.image_size))
    overrides = parse_override_list(args.override)
    cfg = load_config(args.config, overrides, base)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.toy.seed = args.seed
    cfg.validate()
    return cfg


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def cmd_train(args) -> int:
    from .experiment import build_datasets, write_manifest
    from .plots import plot_training_log
    from .training import train

    cfg = resolve_config(args)
    out = _prepare_out(args.out)
    write_manifest(out, cfg, "train")
    data = build_datasets(cfg, out / "load_report.json")
    final = train(cfg, out, data.train, resume=args.resume)
    plot_training_log(out / "train_log.csv", out)
    print(f"checkpoint: {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import build_datasets, evaluate_encoder, load_encoder, write_manifest
    from .plots import plot_recall_bars
    from .retrieval import write_metrics

    cfg = resolve_config(args)
    out = _prepare_out(args.out)
    protocols = args.protocol or ["uav_sat_single", "uav_sat_multi"]
    if args.checkpoint != "oracle" and not Path(args.checkpoint).is_file():
        raise DatasetError(f"checkpoint not found: {args.checkpoint}")
    write_manifest(out, cfg, "eval", extra={"checkpoint": args.checkpoint, "protocols": protocols})
    encoder = load_encoder(args.checkpoint)
    data = build_datasets(cfg, out / "load_report.json")
    reports = []
    for proto, ev in evaluate_encoder(encoder, data, protocols, cfg.eval.batch_size).items():
        write_metrics(ev, out, cfg.eval.topk_dump)
        reports.append(ev.report)
        print(json.dumps(ev.report))
    plot_recall_bars(reports, out / "recall.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import run_ablation, write_manifest
    from .plots import plot_ablation

    cfg = resolve_config(args)
    out = _prepare_out(args.out)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --seeds {args.seeds!r}") from exc
    if not seeds:
        raise UsageError("--seeds is empty")
    protocol = (args.protocol or ["uav_sat_single"])[0]
    write_manifest(out, cfg, "ablate", extra={"seeds": seeds, "protocol": protocol})
    summary = run_ablation(cfg, out, seeds, protocol=protocol)
    plot_ablation(summary, out / "ablation.png")
    for row in summary:
        print(json.dumps(row))
    return EXIT_OK


def cmd_toygen(args) -> int:
    from .experiment import write_manifest

    cfg = resolve_config(args)
    out = _prepare_out(args.out)
    toy = cfg.toy
    toy.image_size = cfg.data.image_size
    train_set, query, gallery = generate_toy_dataset(toy)
    write_university1652_tree(out, train_set, query, gallery)
    write_manifest(out, cfg, "toygen")
    print(f"wrote {len(train_set) + len(query) + len(gallery)} images to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plots import plot_recall_bars

    root = Path(args.out)
    if not root.is_dir():
        raise DatasetError(f"no such directory: {root}")
    reports = []
    for path in sorted(root.rglob("metrics_*.json")):
        rep = json.loads(path.read_text())
        rep["label"] = f"{path.parent.relative_to(root)}/{rep['protocol']}"
        reports.append(rep)
    if not reports:
        raise DatasetError(f"no metrics_*.json files under {root}")
    lines = ["| run | R@1 | R@5 | R@10 | AP | queries | gallery |", "|---|---|---|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {r['label']} | {r['R@1']:.4f} | {r['R@5']:.4f} | {r['R@10']:.4f} | {r['AP']:.4f} "
                     f"| {r['num_queries']} | {r['num_gallery']} |")
    (root / "report.md").write_text("\n".join(lines) + "\n")
    plot_recall_bars(reports, root / "report.png")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "toygen": cmd_toygen, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"pvda: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"pvda: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.exception("runtime failure")
        print(f"pvda: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
