"""Command-line entry point: ``hfbrimae <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import derive_seed
from .errors import ConfigError, DataError, EmptyCloudError, NumericError, ParseError, SizeError
from .geom import apply_rotation, sample_rotation
from .mae import HfbriMae, ModelConfig
from .pcio import load_point_cloud
from .probe import GRID_HEADER, evaluate_grid, few_shot_accuracies
from .rihf import RIGF_COLUMNS, RILF_COLUMNS, cloud_features
from .training import finetune, global_features, pretrain

log = logging.getLogger("hfbrimae")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def write_csv(path, header, rows, seed, config_hash):
    """CSV with a header row and a trailing ``# seed=<s> config_hash=<h>`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        fh.write(f"# seed={seed} config_hash={config_hash}\n")
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class Run:
    """Resolved config plus the context every command needs."""

    def __init__(self, args):
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if cfg.seed is None:
            raise ConfigError("a seed is required: set \"seed\" in the config or pass --seed")
        if args.out:
            cfg.output = args.out
        self.cfg = cfg
        self.seed = int(cfg.seed)
        self.threads = max(1, args.threads)
        self.out = Path(cfg.output)
        self.hash = cfg.config_hash()
        self.checkpoint = args.checkpoint

    def csv(self, name, header, rows):
        path = write_csv(self.out / name, header, rows, self.seed, self.hash)
        log.info("wrote %s", path)
        return path

    def model(self, required=True, model_cfg=None):
        """Model from --checkpoint (checked against the config) or freshly initialized."""
        model_cfg = model_cfg or self.cfg.model
        if self.checkpoint:
            if not Path(self.checkpoint).is_file():
                raise ConfigError(f"checkpoint {self.checkpoint} does not exist")
            model, _ = load_checkpoint(self.checkpoint, expect=model_cfg)
            return model
        if required:
            raise ConfigError("this command needs --checkpoint")
        log.warning("no --checkpoint given; using randomly initialized weights")
        return HfbriMae(model_cfg)

    def extractor(self, model, drop_groups=()):
        pooling = self.cfg.probe.pooling

        def extract(clouds, setting, seed):
            return global_features(model, clouds, setting, seed, threads=self.threads,
                                   pooling=pooling, drop_groups=drop_groups)

        return extract

    def probe_params(self):
        p = self.cfg.probe
        return {"epochs": p.epochs, "lr": p.lr, "lam": p.lam}


def _metrics_rows(history, with_accuracy=False):
    for r in history:
        row = [r.epoch, r.mean_loss, r.lr]
        if with_accuracy:
            row.append(r.accuracy)
        row.append(r.wall_seconds)
        yield row


def cmd_pretrain(run, args):
    cfg = run.cfg
    train, _ = cfg.datasets()
    model = HfbriMae(cfg.model)
    history = pretrain(
        model, train, cfg.epochs, cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.train_rotation,
        run.seed, run.threads, checkpoint_every=cfg.checkpoint_every, checkpoint_dir=run.out,
    )
    steps = cfg.epochs * -(-len(train) // cfg.batch_size)
    save_checkpoint(run.out / "checkpoint.hfbm", model, steps)
    run.csv("metrics.csv", ("epoch", "mean_loss", "lr", "wall_seconds"), _metrics_rows(history))


def cmd_probe(run, args):
    cfg = run.cfg
    train, test = cfg.datasets()
    rows = evaluate_grid(run.extractor(run.model(required=False)), train, test,
                         (cfg.train_rotation,), (cfg.test_rotation,), run.seed, run.probe_params())
    run.csv("probe.csv", GRID_HEADER, rows)


def cmd_eval_grid(run, args):
    train, test = run.cfg.datasets()
    rows = evaluate_grid(run.extractor(run.model(required=False)), train, test,
                         seed=run.seed, probe_params=run.probe_params())
    run.csv("grid.csv", GRID_HEADER, rows)


def cmd_fewshot(run, args):
    cfg = run.cfg
    fs = cfg.fewshot
    _, test = cfg.datasets()
    accs = few_shot_accuracies(
        run.extractor(run.model(required=False)), test, fs.ways, fs.shots, fs.queries, fs.episodes,
        run.seed, cfg.train_rotation, cfg.test_rotation, run.probe_params(),
    )
    rows = [(e, fs.ways, fs.shots, fs.queries, a, "") for e, a in enumerate(accs)]
    rows.append(("aggregate", fs.ways, fs.shots, fs.queries, float(np.mean(accs)), float(np.std(accs))))
    run.csv("fewshot.csv", ("episode", "ways", "shots", "queries", "accuracy", "std"), rows)


def cmd_finetune(run, args):
    cfg = run.cfg
    ft = cfg.finetune
    task = args.task or ft.task
    head_only = ft.head_only or args.head_only
    train, test = cfg.datasets()
    model = run.model(required=False)
    history = finetune(
        model, task, train, test, ft.epochs, cfg.batch_size, ft.lr, cfg.weight_decay,
        cfg.train_rotation, cfg.test_rotation, head_only, run.seed, run.threads,
    )
    save_checkpoint(run.out / f"finetune_{task}.hfbm", model, len(history))
    run.csv(f"finetune_{task}.csv", ("epoch", "mean_loss", "lr", "accuracy", "wall_seconds"),
            _metrics_rows(history, with_accuracy=True))


def cmd_extract_features(run, args):
    if not args.input:
        raise ConfigError("extract-features needs --input <cloud file>")
    cfg = run.cfg
    cloud = load_point_cloud(args.input)
    pts = cloud.points
    if args.rotation:
        pts = apply_rotation(pts, sample_rotation(args.rotation, derive_seed(run.seed)))
    m = cfg.model
    feats = cloud_features(pts, m.n_patches, m.points_per_patch, m.start_index)
    rilf_rows = [
        [p, int(feats.ordered_members[p, i])] + feats.rilf[p, i].tolist()
        for p in range(feats.rilf.shape[0]) for i in range(feats.rilf.shape[1])
    ]
    rigf_rows = [[p, int(feats.center_indices[p])] + feats.rigf[p].tolist()
                 for p in range(feats.rigf.shape[0])]
    run.csv("rilf.csv", ("patch_id", "point_id") + RILF_COLUMNS, rilf_rows)
    run.csv("rigf.csv", ("patch_id", "center_id") + RIGF_COLUMNS, rigf_rows)


def cmd_ablate(run, args):
    cfg = run.cfg
    ab = cfg.ablate
    sweep = args.sweep
    epochs = ab.epochs or cfg.epochs
    train, test = cfg.datasets()
    settings = []
    if sweep in ("mask_ratio", "all"):
        settings += [("mask_ratio", f"{r:g}", r, ()) for r in ab.mask_ratios]
    if sweep in ("rilf_groups", "all"):
        settings += [("rilf_groups", "+".join(g) or "none", cfg.model.mask_ratio, tuple(g))
                     for g in ab.rilf_groups]
    rows = []
    for kind, label, ratio, groups in settings:
        model_cfg = ModelConfig.from_dict({**cfg.model.to_dict(), "mask_ratio": ratio})
        model = HfbriMae(model_cfg)
        log.info("ablate %s=%s", kind, label)
        history = pretrain(model, train, epochs, cfg.batch_size, cfg.lr, cfg.weight_decay,
                           cfg.train_rotation, run.seed, run.threads, drop_groups=groups)
        (_, _, acc, n_test, _), = evaluate_grid(
            run.extractor(model, groups), train, test, (cfg.train_rotation,), (cfg.test_rotation,),
            run.seed, run.probe_params(),
        )
        rows.append((kind, label, acc, history[-1].mean_loss, n_test, run.seed))
    run.csv(f"ablate_{sweep}.csv",
            ("sweep", "setting", "probe_accuracy", "final_loss", "n_test", "seed"), rows)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "eval-grid": cmd_eval_grid,
    "fewshot": cmd_fewshot,
    "finetune": cmd_finetune,
    "extract-features": cmd_extract_features,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--checkpoint", help="model checkpoint (.hfbm)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap; 1 is bitwise reproducible")
    common.add_argument("--out", help="output directory (overrides config 'output')")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hfbrimae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "finetune":
            p.add_argument("--task", choices=("classification", "segmentation"))
            p.add_argument("--head-only", action="store_true")
        elif name == "extract-features":
            p.add_argument("--input", help="cloud file (.off, .ply, .xyz)")
            p.add_argument("--rotation", choices=("A", "Z", "R"),
                           help="rotate the cloud (seeded) before extraction")
        elif name == "ablate":
            p.add_argument("--sweep", choices=("mask_ratio", "rilf_groups", "all"), default="all")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run = Run(args)
        with threadpool_limits(limits=run.threads):
            COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, EmptyCloudError, SizeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
