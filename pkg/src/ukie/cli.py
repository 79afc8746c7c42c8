"""Command-line runner: ``ukie {train,eval,sweep,simulate,report}``.

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from ukie.config import ExperimentConfig, Manifest, load_config
from ukie.data import LabeledDataset, load_dataset
from ukie.errors import ConfigError, IngestionError, LayoutMismatchError, MissingArtifactError, NonFiniteLossError
from ukie.evaluation import (
    REPORT_COLUMNS,
    Budget,
    EvalReport,
    SweepSetup,
    read_report,
    snr_sweep,
    sweep_bottleneck,
    sweep_coefficients,
    sweep_invariant_split,
)
from ukie.models import build_model, load_checkpoint
from ukie.semantic_memory import SemanticMemory, drift_increments, run_network_sim
from ukie.training import format_metric, train

log = logging.getLogger("ukie")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4


# --- helpers ---------------------------------------------------------------


def _load_split(cfg: ExperimentConfig, split: str, limit: int | None) -> LabeledDataset:
    ds = cfg.dataset
    if ds.name == "synthetic":
        return load_dataset("synthetic", split, synthetic=ds.synthetic(split, cfg.seed), limit=limit)
    return load_dataset(ds.name, split, ds.resolved_root(), limit=limit)


def _limits(cfg: ExperimentConfig, budget: Budget | None) -> tuple[int | None, int | None]:
    tr, te = cfg.dataset.train_limit, cfg.dataset.test_limit
    if budget is not None:
        tr = min(tr or budget.train_samples, budget.train_samples)
        te = min(te or budget.test_samples, budget.test_samples)
    return tr, te


def _prepare_out(cfg: ExperimentConfig, args, command: str) -> tuple[Path, Manifest]:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.toml")
    man = Manifest(command, cfg.digest(), cfg.seed)
    man.write(out)
    return out, man


def _resolve(args) -> tuple[ExperimentConfig, Budget | None]:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    budget = None
    if getattr(args, "budget", None):
        cfg = cfg.with_budget(args.budget)
        budget = Budget.preset(args.budget)
    return cfg, budget


def _train_config(cfg: ExperimentConfig, budget: Budget | None):
    tc = cfg.train_config()
    return budget.apply(tc) if budget is not None else tc


# --- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, budget = _resolve(args)
    out, man = _prepare_out(cfg, args, "train")
    n_tr, n_te = _limits(cfg, budget)
    train_set = _load_split(cfg, "train", n_tr)
    probe = _load_split(cfg, "test", n_te)
    tc = _train_config(cfg, budget)
    res = train(
        tc,
        train_set,
        cfg.channel,
        layout=cfg.model.layout(),
        arch=cfg.model.arch_config(cfg.seed),
        probe=probe.subset(min(tc.probe_size, len(probe))),
        out_dir=out,
    )
    last = res.log[-1]
    log.info("trained %d rounds: probe PSNR %.2f dB, accuracy %.4f", tc.rounds, last["probe_psnr"], last["probe_acc"])
    man.finish("ok", out)
    return EXIT_OK


def _model_for(cfg: ExperimentConfig, test_set: LabeledDataset):
    return build_model(
        cfg.model.arch_config(cfg.seed),
        cfg.model.layout(),
        test_set.shape,
        test_set.num_classes,
        cfg.channel.symbols(test_set.dim),
    )


def cmd_eval(args) -> int:
    cfg, budget = _resolve(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint", "checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_dir():
        raise MissingArtifactError(f"checkpoint directory {ckpt} not found")
    out, man = _prepare_out(cfg, args, "eval")
    _, n_te = _limits(cfg, budget)
    test_set = _load_split(cfg, "test", n_te)
    m = load_checkpoint(ckpt, expect=_model_for(cfg, test_set))
    mem_path = ckpt / "memory.pt"
    if not mem_path.exists():
        raise MissingArtifactError(f"semantic memory missing: {mem_path}")
    memory = SemanticMemory.load(mem_path)
    rep = snr_sweep(
        m, memory, test_set, cfg.channel, cfg.eval.snrs, accuracy_mode=cfg.eval.accuracy_mode, mi_bins=cfg.eval.mi_bins
    )
    rep.header = {"dataset": cfg.dataset.name, "checkpoint": str(ckpt), "samples": str(len(test_set))}
    rep.write_csv(out / "report_snr.csv")
    _plot_report_file(out / "report_snr.csv")
    man.finish("ok", out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, budget = _resolve(args)
    kind = args.sweep or cfg.eval.sweep
    if kind == "snr":
        raise ConfigError("the SNR sweep runs through 'ukie eval --checkpoint'", "eval.sweep")
    out, man = _prepare_out(cfg, args, f"sweep:{kind}")
    budget = budget or Budget.preset(cfg.eval.budget)
    n_tr, n_te = _limits(cfg, budget)
    setup = SweepSetup(
        _load_split(cfg, "train", n_tr),
        _load_split(cfg, "test", n_te),
        cfg.channel,
        train_cfg=cfg.train_config(),
        arch=cfg.model.arch_config(cfg.seed),
        budget=budget,
        accuracy_mode=cfg.eval.accuracy_mode,
    )
    if kind == "bottleneck":
        rep = sweep_bottleneck(setup, cfg.eval.bottleneck_totals)
    elif kind == "split":
        rep = sweep_invariant_split(setup, cfg.eval.split_invariant, cfg.eval.split_total)
    else:
        if not cfg.eval.coefficients:
            raise ConfigError("coefficient sweep needs a non-empty [eval.coefficients] table", "eval.coefficients")
        rep = sweep_coefficients(setup, cfg.eval.coefficients, cfg.model.layout())
    path = out / f"sweep_{kind}.csv"
    rep.write_csv(path)
    _plot_report_file(path)
    man.finish("ok", out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, _ = _resolve(args)
    out, man = _prepare_out(cfg, args, "simulate")
    p = cfg.protocol
    drift = p.drift_config()
    kappas = list(p.kappas) or [p.kappa]
    # one drift trace shared by every threshold so ledgers are comparable
    inc = drift_increments(drift, p.users, p.horizon, cfg.seed)
    opts = dict(baseline=p.baseline, granularity=p.granularity, merge=p.merge, increments=inc)
    with open(out / "ledger.csv", "w", newline="") as lf, open(out / "divergence.csv", "w", newline="") as dfile:
        lw, dw = csv.writer(lf), csv.writer(dfile)
        lw.writerow(["kappa", "broadcasts_sent", "broadcasts_suppressed", "scalars_transmitted", "final_max_distance"])
        dw.writerow(["kappa", "step", "max_pairwise_distance"])
        for k in kappas:
            res = run_network_sim(p.users, drift, k, p.tau, p.horizon, cfg.seed, **opts)
            led = res.ledger
            lw.writerow(
                [
                    format_metric(float(k)),
                    sum(led.broadcasts_sent),
                    sum(led.broadcasts_suppressed),
                    led.total_scalars,
                    format_metric(res.divergence[-1][1] if res.divergence else 0.0),
                ]
            )
            for t, d in res.divergence:
                dw.writerow([format_metric(float(k)), t, format_metric(d)])
            if k == kappas[0]:
                res.write_events(out / "events.csv")
                res.write_ledger(out / "ledger_per_user.csv")
    from ukie.plotting import plot_divergence, plot_ledger

    plot_ledger(out / "ledger.csv", out / "ledger.png")
    plot_divergence(out / "divergence.csv", out / "divergence.png")
    man.finish("ok", out)
    return EXIT_OK


def _is_report(path: Path) -> bool:
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                return tuple(line.strip().split(",")) == REPORT_COLUMNS
    return False


def _plot_report_file(path: Path) -> Path:
    from ukie.plotting import plot_labeled_report, plot_report

    rep = read_report(path)
    png = path.with_suffix(".png")
    if path.stem == "report_snr" or rep.header.get("sweep") is None and len({r.snr_db for r in rep.rows}) > 1:
        return plot_report(rep, "snr_db", png, title="link quality vs SNR")
    return plot_labeled_report(rep, png, title=rep.header.get("sweep", path.stem))


def cmd_report(args) -> int:
    """Collect every evaluation CSV under the directory into ``summary.csv`` and redraw figures."""
    from ukie.plotting import plot_divergence, plot_ledger, plot_training_curves

    root = Path(args.out or args.dir or "")
    if not root.is_dir():
        raise MissingArtifactError(f"output directory {root} not found")
    reports = sorted(p for p in root.rglob("*.csv") if p.name != "summary.csv" and _is_report(p))
    metrics = sorted(root.rglob("metrics.csv"))
    ledgers = sorted(root.rglob("ledger.csv"))
    if not (reports or metrics or ledgers):
        raise MissingArtifactError(f"no result CSVs under {root}")
    summary = EvalReport(header={"sources": str(len(reports))})
    sources = []
    for p in reports:
        rep = read_report(p)
        summary.extend(rep)
        sources += [str(p.relative_to(root))] * len(rep)
        _plot_report_file(p)
    with open(root / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("source",) + REPORT_COLUMNS)
        for src, row in zip(sources, summary.rows):
            w.writerow([src] + [format_metric(getattr(row, c)) for c in REPORT_COLUMNS])
    for p in metrics:
        plot_training_curves(p, p.with_name("training_curves.png"))
    for p in ledgers:
        plot_ledger(p, p.with_name("ledger.png"))
        div = p.with_name("divergence.csv")
        if div.exists():
            plot_divergence(div, p.with_name("divergence.png"))
    log.info("summary of %d rows from %d reports written to %s", len(summary), len(reports), root / "summary.csv")
    return EXIT_OK


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ukie", description="Knowledge-aided semantic link experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, budget=True):
        p.add_argument("--config", type=str, default=None, help="TOML experiment config")
        p.add_argument("--out", type=str, default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if budget:
            p.add_argument("--budget", choices=("smoke", "desk", "full"), default=None)
        if checkpoint:
            p.add_argument("--checkpoint", type=str, default=None)

    common(sub.add_parser("train", help="train a model"))
    common(sub.add_parser("eval", help="evaluate a checkpoint over the SNR grid"), checkpoint=True)
    p = sub.add_parser("sweep", help="train and evaluate one model per sweep cell")
    common(p)
    p.add_argument("--sweep", choices=("bottleneck", "split", "coefficients"), default=None)
    common(sub.add_parser("simulate", help="multi-user memory synchronization"), budget=False)
    p = sub.add_parser("report", help="aggregate CSVs and redraw figures")
    p.add_argument("dir", nargs="?", default=None)
    p.add_argument("--out", type=str, default=None)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "simulate": cmd_simulate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, LayoutMismatchError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        log.error("numeric abort: %s (snapshot: %s)", e, e.snapshot)
        return EXIT_NUMERIC
    except (MissingArtifactError, IngestionError) as e:
        log.error("missing artifact: %s", e)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
