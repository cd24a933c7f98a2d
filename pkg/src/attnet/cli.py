"""Command-line entry point: ``attnet <command> --config run.cfg ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors print one line to stderr: ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .config import load_run_config
from .evaluation import (
    CrossValidationResult,
    FoldResult,
    ablation_csv,
    ablation_grid,
    cross_validate,
    evaluate_model,
    folds_csv,
    margin_csv,
    measure_fps,
    recall_curve_csv,
)
from .exceptions import AttnetError, ConfigError
from .model import Descriptor, describe, describe_images, init_model, load_checkpoint, save_checkpoint
from .projection import project, save_range_image
from .retrieval import build_map, load_map, query, save_map
from .tensor import set_precision
from .training import margin_sweep, prepare_sequence, train

log = logging.getLogger("attnet")


class UsageError(AttnetError):
    category = "usage"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(out_dir, command, cfg, artifacts):
    out_dir = Path(out_dir)
    lines = [f"command={command}", f"seed={cfg.seed}", "[config]", cfg.echo(), "[artifacts]"]
    for path in artifacts:
        lines.append(f"{Path(path).name} sha256={_sha256(path)}")
    (out_dir / f"manifest_{command}.txt").write_text("\n".join(lines) + "\n")


def _out_dir(cfg, args):
    out = Path(getattr(args, "out", None) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prepared(cfg, names=None):
    root = cfg.dataset_root()
    names = names or cfg.sequences
    if not names:
        raise ConfigError("no sequences configured")
    limit = cfg.max_frames or None
    prepared = []
    for name in names:
        seq = data_mod.load_sequence(root, name, normalize=cfg.remission_normalize, limit=limit)
        prepared.append(
            prepare_sequence(seq, cfg.projection(), cfg.protocol().r_th, cfg.min_frame_gap)
        )
    return prepared


def _state(cfg, args):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    return init_model(cfg.model(), cfg.seed or 0)


# ----------------------------------------------------------------- commands


def cmd_synthesize(args):
    mapping = data_mod.read_manifest(args.manifest)
    base = data_mod.synthetic_config_from_mapping(mapping)
    out = Path(args.out)
    names = [s for s in args.sequences.split(",") if s] if args.sequences else [base.name]
    for i, name in enumerate(names):
        cfg = replace(base, seed=base.seed + i, name=name)
        seq = data_mod.synthetic_sequence(cfg)
        data_mod.save_sequence(out, seq)
        data_mod.write_manifest(out / f"{name}.manifest", cfg)
        print(f"{name}: {len(seq.clouds)} frames")
    return 0


def cmd_project(args, cfg):
    out = _out_dir(cfg, args)
    target = Path(args.input)
    if target.suffix == ".bin":
        if not target.is_file():
            raise UsageError(f"no such scan: {target}")
        clouds = [data_mod.load_kitti_scan(target)]
    else:
        scan_dir, _ = data_mod.sequence_paths(cfg.dataset_root(), args.input)
        if not scan_dir.is_dir():
            raise UsageError(f"no such scan or sequence: {args.input}")
        clouds = data_mod.load_sequence(cfg.dataset_root(), args.input, cfg.remission_normalize).clouds
    valid = []
    for cloud in clouds:
        image = project(cloud, cfg.projection())
        save_range_image(out / f"{cloud.frame_id:06d}.arng", image)
        valid.append(image.valid_fraction)
    print(f"projected {len(valid)} frames, mean valid-pixel fraction {sum(valid) / len(valid):.6f}")
    return 0


def cmd_train(args, cfg):
    cfg.require("seed", "margin", "r_th")
    out = _out_dir(cfg, args)
    prepared = _load_prepared(cfg)
    log_path = out / "train.log"
    log_path.write_text("epoch,step,loss,pos_sim,neg_sim\n")
    state = init_model(cfg.model(), cfg.seed)
    state, report = train(state, prepared, cfg.training(log_path, out / "checkpoints"))
    ckpt = out / "model.adlw"
    save_checkpoint(ckpt, state)
    write_run_manifest(out, "train", cfg, [ckpt, log_path])
    for epoch, loss in enumerate(report.epoch_loss, start=1):
        print(f"epoch {epoch}: loss {loss:.6f}")
    return 0


def cmd_build_map(args, cfg):
    state = _state(cfg, args)
    (prepared,) = _load_prepared(cfg, [args.sequence])
    values = describe_images(prepared.images, state)
    dmap = build_map(
        [Descriptor(v, int(f)) for v, f in zip(values, prepared.frame_ids)], tag=prepared.name
    )
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_map(path, dmap)
    write_run_manifest(path.parent, "build-map", cfg, [path])
    print(f"{len(dmap)} descriptors of dimension {dmap.dim} -> {path}")
    return 0


def cmd_query(args, cfg):
    state = _state(cfg, args)
    dmap = load_map(args.map)
    scan = Path(args.scan)
    if not scan.is_file():
        raise UsageError(f"no such scan: {scan}")
    cloud = data_mod.load_kitti_scan(scan)
    desc = describe(cloud, state, cfg.projection())
    result = query(dmap, desc, args.n)
    for frame_id, sim in result.candidates:
        print(f"{frame_id} {sim:.6f}")
    return 0


def cmd_eval(args, cfg):
    cfg.require("seed", "r_th")
    out = _out_dir(cfg, args)
    prepared = _load_prepared(cfg)
    protocol = cfg.protocol()
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        folds = []
        for p in prepared:
            if p.ground_truth.is_empty:
                continue
            metrics, curve = evaluate_model(state, p, protocol)
            folds.append(FoldResult(p.name, metrics, curve))
        result = CrossValidationResult(folds)
        name = state.config.name
    else:
        cfg.require("margin")
        model_cfg = cfg.model()
        result = cross_validate(prepared, model_cfg, cfg.training(), protocol, seed=cfg.seed)
        name = model_cfg.name
    folds_path = out / "folds.csv"
    curve_path = out / "recall_curve.csv"
    folds_path.write_text(folds_csv(result))
    curve_path.write_text(recall_curve_csv([f.curve for f in result.folds], name))
    write_run_manifest(out, "eval", cfg, [folds_path, curve_path])
    for f in result.folds:
        m = f.metrics
        print(f"{f.name}: precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f}")
    print(f"mean f1 {result.mean_f1:.4f}")
    return 0


def cmd_ablate(args, cfg):
    cfg.require("seed", "margin", "r_th")
    out = _out_dir(cfg, args)
    prepared = _load_prepared(cfg)
    root = cfg.dataset_root()
    bench = data_mod.load_sequence(root, prepared[0].name, cfg.remission_normalize, limit=cfg.bench_frames)
    rows = ablation_grid(
        cfg.ablation_encoders,
        cfg.ablation_attention,
        prepared,
        cfg.model(),
        cfg.training(),
        cfg.protocol(),
        clouds=bench.clouds,
        projcfg=cfg.projection(),
        seed=cfg.seed,
        warmup=cfg.bench_warmup,
    )
    path = out / "ablation.csv"
    path.write_text(ablation_csv(rows, [p.name for p in prepared]))
    write_run_manifest(out, "ablate", cfg, [path])
    print(path.read_text(), end="")
    return 0


def cmd_sweep(args, cfg):
    cfg.require("seed", "r_th")
    out = _out_dir(cfg, args)
    rows = margin_sweep(cfg.margins, _load_prepared(cfg), cfg.model(), cfg.training(), cfg.protocol(), cfg.seed)
    path = out / "margins.csv"
    path.write_text(margin_csv(rows))
    write_run_manifest(out, "sweep", cfg, [path])
    print(path.read_text(), end="")
    return 0


def cmd_bench(args, cfg):
    state = _state(cfg, args)
    name = args.sequence or (cfg.sequences[0] if cfg.sequences else None)
    if not name:
        raise ConfigError("bench needs a sequence (--sequence or sequences=)")
    seq = data_mod.load_sequence(cfg.dataset_root(), name, cfg.remission_normalize, limit=cfg.bench_frames)
    result = measure_fps(state, seq.clouds, cfg.projection(), warmup=cfg.bench_warmup)
    print(f"{state.config.name}: {result.mean:.2f} FPS (std {result.std:.2f}, {len(result.runs)} runs)")
    return 0


COMMANDS = {
    "project": cmd_project,
    "train": cmd_train,
    "build-map": cmd_build_map,
    "query": cmd_query,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="attnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", help="write a synthetic course in KITTI layout")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", default="")

    def with_config(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        return p

    p = with_config("project", "dump range images (ARNG) for a scan or sequence")
    p.add_argument("input")
    p.add_argument("--out")
    p = with_config("train", "train a model; writes model.adlw and train.log")
    p.add_argument("--out")
    p = with_config("build-map", "describe a sequence and write an ADLM map")
    p.add_argument("--checkpoint")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p = with_config("query", "top-N map matches for one scan")
    p.add_argument("--checkpoint")
    p.add_argument("--map", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("-n", type=int, default=1)
    p = with_config("eval", "folds.csv and recall_curve.csv")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p = with_config("ablate", "ExAy grid; writes ablation.csv")
    p.add_argument("--out")
    p = with_config("sweep", "margin sweep; writes margins.csv")
    p.add_argument("--out")
    p = with_config("bench", "descriptor throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--sequence")
    return parser


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigError, FileNotFoundError)):
        return 2
    return 1


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        if args.command == "synthesize":
            return cmd_synthesize(args)
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        if not Path(args.config).is_file():
            raise UsageError(f"no such config file: {args.config}")
        cfg = load_run_config(args.config, overrides)
        set_precision(cfg.precision)
        return COMMANDS[args.command](args, cfg)
    except (AttnetError, OSError) as exc:
        category = getattr(exc, "category", "io")
        print(f"error: {category}: {exc}".replace("\n", " "), file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
