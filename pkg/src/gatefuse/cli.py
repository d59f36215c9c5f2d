"""gatefuse command line: gen, train, eval, gate-report, ablate, hist.

Exit codes: 0 success, 2 usage or config error, 3 numerical divergence,
4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import evalreport as E
from . import model as M
from . import synth
from .config import load_config, parse_assignments
from .errors import ArtifactError, ConfigurationError, DivergenceError, GateFuseError
from .trainer import train, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_ARTIFACT = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"

log = logging.getLogger("gatefuse")


class UsageError(GateFuseError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "--spec", dest="config", help="TOML config with flat dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatefuse", description="instruction-gated multimodal fusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of episodes")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", help="train a model on one or more datasets")
    _common(p)
    p.add_argument("--data", action="append", default=[], help="dataset directory (repeatable)")
    p.add_argument("--variant")
    p.add_argument("--force", action="store_true")

    for name, text in (("eval", "evaluate a checkpoint"), ("gate-report", "per-sample gate CSV only")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", action="append", default=[])
        p.add_argument("--checkpoint")
        p.add_argument("--split", choices=synth.SPLITS)
        p.add_argument("--subset", help="modality=K keeps episodes whose queried modality is K")
        p.add_argument("--variant", help="ignored; the checkpoint fixes the variant")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("ablate", help="train and compare variants over seeds")
    _common(p)
    p.add_argument("--data", action="append", default=[])
    p.add_argument("--variant", action="append", default=[], help="variant to include (repeatable)")
    p.add_argument("--variants", help="comma-separated variant list")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("hist", help="text histogram of a numeric CSV column")
    p.add_argument("csv")
    p.add_argument("--column", default="beta_m1")
    p.add_argument("--bins", type=int, default=10)
    return parser


# --- helpers -------------------------------------------------------------------------

def _resolve(args, extra: dict | None = None):
    overrides = parse_assignments(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["paths.out"] = args.out
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _out_dir(cfg, force: bool, default: str | None = None, allow_existing: bool = False) -> Path:
    out = cfg["paths.out"] or default
    if not out:
        raise ConfigurationError("no output directory; pass --out or set paths.out")
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigurationError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise ConfigurationError(f"output directory {out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg) -> list[synth.Dataset]:
    paths = cfg["paths.data"]
    if not paths:
        raise ConfigurationError("no dataset; pass --data or set paths.data")
    return [synth.load_dataset(p) for p in paths]


def model_config_for(cfg, datasets) -> M.ModelConfig:
    widths: dict[int, int] = {}
    for ds in datasets:
        for m, w in zip(ds.spec.ids, ds.spec.modality_dims):
            if widths.setdefault(m, w) != w:
                raise ConfigurationError(f"modality {m} has width {widths[m]} in one dataset and {w} in another")
    fusion = cfg.fusion_config(sorted(widths.items()))
    return M.ModelConfig(
        fusion=fusion,
        vocab_in=max(ds.spec.vocab_size for ds in datasets),
        vocab_ans=max(ds.spec.n_classes for ds in datasets),
        head=cfg["model.head"],
    )


def _subset(episodes, subset: str):
    if not subset:
        return episodes
    key, _, value = subset.partition("=")
    if key.strip() != "modality" or not value.strip().lstrip("-").isdigit():
        raise ConfigurationError(f"--subset expects modality=K, got {subset!r}")
    k = int(value)
    return [ep for ep in episodes if k in ep.informative]


def _fmt(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(x)


# --- commands ------------------------------------------------------------------------

def cmd_gen(args) -> int:
    extra = {"gen.n": args.n} if args.n is not None else {}
    cfg = _resolve(args, extra)
    spec = cfg.task_spec()
    out = _out_dir(cfg, args.force)
    for name in (synth.MANIFEST, synth.FEATURES):
        (out / name).unlink(missing_ok=True)
    ds = synth.generate_dataset(spec, int(cfg["gen.n"]), seed=int(cfg["seed"]), name=cfg["gen.name"])
    synth.save_dataset(ds, out)
    cfg.echo(out)
    sizes = {k: len(r) for k, r in ds.splits.items()}
    print(f"wrote {len(ds)} episodes to {out}")
    print(f"modalities {list(spec.ids)} dims {list(spec.modality_dims)} classes {spec.n_classes} "
          f"mode {spec.relevance_mode} seed {ds.seed}")
    print("split " + "/".join(str(sizes[s]) for s in synth.SPLITS) + " (train/val/test)")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {}
    if args.data:
        extra["paths.data"] = args.data
    if args.variant:
        extra["variant"] = args.variant
    cfg = _resolve(args, extra)
    datasets = _datasets(cfg)
    mcfg = model_config_for(cfg, datasets)
    tcfg = cfg.train_config()
    out = _out_dir(cfg, args.force)
    cfg.echo(out)
    log.info("training variant %s seed %d for %d steps", cfg["variant"], tcfg.seed, tcfg.total_steps)
    result = train(M.init_params(mcfg, tcfg.seed), datasets, mcfg, tcfg)
    write_history_csv(result.history, out / METRICS_NAME)
    extra_info = {"best_step": result.best_step, "best_val": result.best_val, "variant": cfg["variant"],
                  "seed": tcfg.seed}
    M.save_checkpoint(out / CHECKPOINT_NAME, result.params, mcfg, extra_info)
    print(f"best mean validation accuracy {_fmt(result.best_val)} at step {result.best_step}"
          f"{' (early stop)' if result.stopped_early else ''}")
    print(f"checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _run_eval(args, gates_only: bool) -> int:
    extra = {}
    if args.data:
        extra["paths.data"] = args.data
    if args.checkpoint:
        extra["paths.checkpoint"] = args.checkpoint
    if args.split:
        extra["eval.split"] = args.split
    if args.subset:
        extra["eval.subset"] = args.subset
    cfg = _resolve(args, extra)
    ckpt = cfg["paths.checkpoint"]
    if not ckpt:
        raise ConfigurationError("no checkpoint; pass --checkpoint or set paths.checkpoint")
    params, mcfg, info = M.load_checkpoint(ckpt)
    datasets = _datasets(cfg)
    out = _out_dir(cfg, args.force, allow_existing=True)
    cfg.echo(out)
    rows_all, summaries = [], []
    for ds in datasets:
        episodes = _subset(ds.split(cfg["eval.split"]), cfg["eval.subset"])
        if not episodes:
            raise ConfigurationError(f"dataset {ds.name!r}: no episodes left in split {cfg['eval.split']!r}")
        _check_compatible(ds, mcfg)
        records = E.predict_records(params, episodes, mcfg)
        rows = E.gate_rows(records, mcfg.fusion.modality_ids)
        for r in rows:
            r["dataset"] = ds.name
        rows_all.extend(rows)
        res = E.summarize(records)
        summaries.append({"dataset": ds.name, "split": cfg["eval.split"], **res.summary_row()})
        if not gates_only:
            print(f"{ds.name} [{cfg['eval.split']}] n={res.n} accuracy={_fmt(res.accuracy)} "
                  f"gate_top1_alignment={_fmt(res.gate_top1_alignment)} fallback_rate={_fmt(res.fallback_rate)}")
    columns = ["dataset"] + [c for c in rows_all[0] if c != "dataset"]
    E.write_csv(rows_all, out / "gates.csv", columns)
    if not gates_only:
        E.write_csv(summaries, out / "eval_summary.csv")
    print(f"per-sample gates {out / 'gates.csv'}")
    return EXIT_OK


def _check_compatible(ds, mcfg: M.ModelConfig) -> None:
    for m, w in zip(ds.spec.ids, ds.spec.modality_dims):
        try:
            expected = mcfg.fusion.feature_width(m)
        except ConfigurationError:
            raise ArtifactError(f"dataset modality {m} is unknown to the checkpoint "
                                f"(fusion.modalities {list(mcfg.fusion.modality_ids)})") from None
        if expected != w:
            raise ArtifactError(f"field fusion.proj.m{m}.weight expects width {expected}, dataset has {w}")
    if ds.spec.vocab_size > mcfg.vocab_in:
        raise ArtifactError(f"field embed.instruction has {mcfg.vocab_in} rows, dataset needs {ds.spec.vocab_size}")
    if ds.spec.n_classes > mcfg.vocab_ans:
        raise ArtifactError(f"answer head has {mcfg.vocab_ans} classes, dataset needs {ds.spec.n_classes}")


def cmd_eval(args) -> int:
    return _run_eval(args, gates_only=False)


def cmd_gate_report(args) -> int:
    return _run_eval(args, gates_only=True)


def cmd_ablate(args) -> int:
    extra = {}
    if args.data:
        extra["paths.data"] = args.data
    variants = list(args.variant)
    if args.variants:
        variants += [v.strip() for v in args.variants.split(",") if v.strip()]
    if variants:
        extra["ablate.variants"] = variants
    if args.seeds:
        extra["ablate.seeds"] = args.seeds
    cfg = _resolve(args, extra)
    variants = cfg["ablate.variants"]
    if not variants:
        raise ConfigurationError("ablate needs at least one variant")
    seeds = cfg["ablate.seeds"]
    if not seeds:
        raise ConfigurationError("ablate needs at least one seed")
    datasets = _datasets(cfg)
    if len(datasets) != 1:
        raise ConfigurationError("ablate runs on exactly one dataset")
    out = _out_dir(cfg, args.force)
    cfg.echo(out)
    if len(seeds) == 1:
        print("warning: a single seed gives no spread; std columns are empty", file=sys.stderr)
    runs = []
    base = dict(cfg.values)
    for v in variants:
        cfg.values = dict(base, variant=v)
        mcfg = model_config_for(cfg, datasets)
        for s in seeds:
            cfg.values["seed"] = int(s)
            tcfg = cfg.train_config()
            log.info("ablate: variant %s seed %d", v, s)
            result = train(M.init_params(mcfg, int(s)), datasets, mcfg, tcfg)
            res = E.evaluate(result.params, datasets[0].split(cfg["ablate.split"]), mcfg)
            runs.append(E.VariantRun(v, int(s), res.accuracy, res.gate_top1_alignment, result.best_step))
    cfg.values = base
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = E.comparison_table(runs, variants)
    E.write_csv(table, out / "comparison.csv", E.COMPARISON_COLUMNS)
    E.write_csv([vars(r) for r in runs], out / "runs.csv")
    for row in table:
        print(f"{row['variant']:<18} acc {row['accuracy_mean']:.4f} +- {_fmt(row['accuracy_std'])}  "
              f"align {_fmt(row['alignment_mean'])}")
    print(f"comparison {out / 'comparison.csv'}")
    return EXIT_OK


def cmd_hist(args) -> int:
    import csv

    path = Path(args.csv)
    if not path.exists():
        raise ConfigurationError(f"CSV file not found: {path}")
    with path.open() as fh:
        reader = csv.DictReader(fh)
        if args.column not in (reader.fieldnames or []):
            raise ConfigurationError(f"column {args.column!r} not in {reader.fieldnames}")
        values = [float(r[args.column]) for r in reader if r[args.column] not in ("", "nan")]
    if not values:
        print("no values")
        return EXIT_OK
    counts, edges = np.histogram(values, bins=args.bins)
    width = max(counts.max(), 1)
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"[{lo:8.4f}, {hi:8.4f}) {'#' * int(round(40 * c / width)):<40} {c}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gate-report": cmd_gate_report,
    "ablate": cmd_ablate,
    "hist": cmd_hist,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (GateFuseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
