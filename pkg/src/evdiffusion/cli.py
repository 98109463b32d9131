"""Command-line entry point: ``evdiffusion {ingest,train,sample,evaluate,bid}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import bidding, evaluation, ingest
from .config import RunConfig, dump_config, load_config
from .engine import (
    LOSS_REDUCTION,
    NormalizationRecord,
    ScenarioBatch,
    TrainConfig,
    build_model,
    normalize,
    read_batch_csv,
    sample,
    train,
    write_batch_csv,
    write_loss_history,
)
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .schedule import build_schedule

log = logging.getLogger("evdiffusion")

WORKERS_ENV = "EVDIFFUSION_WORKERS"


class CommandError(Exception):
    pass


def _require(path: str, what: str) -> Path:
    if not path:
        raise CommandError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def _manifest(out: Path, cfg: RunConfig, stage: str, **extra) -> None:
    lines = [f"stage = {stage}", f"root_seed = {cfg.run.seed}", f"stage_seed = {cfg.stage_seed(stage)}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    (out / f"{stage}_manifest.txt").write_text("\n".join(lines) + "\n\n" + dump_config(cfg))


# -- commands ------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, out: Path) -> None:
    src = _require(cfg.paths.sessions, "session file")
    report = ingest.IngestReport(voltage=cfg.ingest.voltage, rate_unit=cfg.ingest.rate_unit)
    sessions = ingest.parse_sessions(src, report)

    curves = ingest.build_battery_curves(sessions, report, length=cfg.ingest.curve_length)
    if curves:
        write_batch_csv(out / "battery.csv", ScenarioBatch(np.array([c.values for c in curves])))

    labels = ingest.station_labels(sessions)
    profiles = []
    for station, lab in labels.items():
        profiles += ingest.build_station_profiles(
            sessions, station, lab, cfg.ingest.rate_unit, cfg.ingest.voltage, cfg.ingest.profile_length)
    if profiles:
        write_batch_csv(out / "station.csv",
                        ScenarioBatch(np.array([p.values for p in profiles]), np.array([p.label for p in profiles])))

    lines = report.lines()
    lines += [f"battery_curves = {len(curves)}", f"station_profiles = {len(profiles)}"]
    lines += [f"label.{s} = {i}" for s, i in labels.items()]
    (out / "ingest_report.txt").write_text("\n".join(lines) + "\n")
    log.info("ingested %d sessions -> %d curves, %d daily profiles", len(sessions), len(curves), len(profiles))


def cmd_train(cfg: RunConfig, out: Path) -> None:
    batch = read_batch_csv(_require(cfg.paths.data, "training corpus"))
    conditional = cfg.run.task == "station"
    if conditional and batch.labels is None:
        raise CommandError("station task needs a corpus with a 'label' column")
    if not conditional and batch.labels is not None:
        raise CommandError("battery task expects an unlabelled corpus")
    values, record = normalize(batch.values)
    sched = build_schedule(cfg.diffusion.steps, cfg.diffusion.beta_1, cfg.diffusion.beta_T)
    net = NetworkConfig(
        seq_len=batch.length, hidden=cfg.network.hidden, heads=cfg.network.heads,
        head_dim=cfg.network.head_dim, conditional=conditional,
        n_labels=cfg.network.n_labels if conditional else 2,
    )
    seed = cfg.stage_seed("train")
    model = build_model(net, seed=seed)
    tcfg = TrainConfig(cfg.train.epochs, cfg.train.batch_size, cfg.train.learning_rate,
                       cfg.train.patience, seed=seed, lr_schedule=cfg.train.lr_schedule,
                       ema_decay=cfg.train.ema_decay)
    result = train(values, model, sched, tcfg, labels=batch.labels,
                   progress=lambda e, l: log.info("epoch %d loss %.5f", e, l))
    meta = {
        "normalization": record.to_dict(),
        "schedule": {"T": sched.T, "beta_1": sched.beta_1, "beta_T": sched.beta_T},
        "loss_reduction": LOSS_REDUCTION,
        "root_seed": cfg.run.seed,
        "stage_seed": seed,
        "epochs_run": len(result.history),
        "stop_reason": result.stop_reason,
    }
    save_checkpoint(out / "model.json", result.model, meta)
    write_loss_history(out / "loss.csv", result.history)
    _manifest(out, cfg, "train", epochs_run=len(result.history), stop_reason=result.stop_reason)


def cmd_sample(cfg: RunConfig, out: Path, n: int, label: int | None) -> None:
    model, meta = load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
    if model.config.conditional and label is None:
        raise CommandError("conditional checkpoint needs --label")
    if not model.config.conditional and label is not None:
        raise CommandError("unconditional checkpoint does not take --label")
    s = meta["schedule"]
    sched = build_schedule(s["T"], s["beta_1"], s["beta_T"])
    record = NormalizationRecord.from_dict(meta["normalization"])
    batch = sample(model, sched, n, label=label, seed=cfg.stage_seed("sample"), record=record)
    if cfg.run.task == "battery":
        batch.values = np.clip(batch.values, 0.0, None)
    write_batch_csv(out / "samples.csv", batch)
    _manifest(out, cfg, "sample", n=n, label=label)


def cmd_evaluate(cfg: RunConfig, out: Path, real_path: str, gen_path: str) -> evaluation.MetricReport:
    real = read_batch_csv(_require(real_path, "real corpus"))
    gen = read_batch_csv(_require(gen_path, "generated corpus"))
    ev = cfg.evaluation
    seed = cfg.stage_seed("evaluate")
    rep = evaluation.MetricReport(
        evaluation.marginal_score(real.values, gen.values, ev.bins),
        *evaluation.discriminative_score(real.values, gen.values, ev.repeats, seed=seed),
    )
    step = ev.step_minutes
    if cfg.run.task == "battery":
        ts = evaluation.tail_score(real.values, gen.values, ev.k_tail, seed=seed, step_minutes=step)
        rep.tail_mean, rep.tail_std = ts.mean, ts.std
        rep.extra["tail_flagged_clusters"] = float(len(ts.flagged))

        vr = evaluation.recover_valid_length(real.values, step)
        vg = evaluation.recover_valid_length(gen.values, step)
        edges, pr = evaluation.duration_pdf(vr, step)
        _, pg = evaluation.duration_pdf(vg, step)
        rep.extra["duration_tv"] = evaluation.histogram_tv(pr, pg)
        evaluation.write_table(out / "duration_pdf.csv", ["bin_start_h", "real", "gen"],
                               zip(edges[:-1], pr, pg))
        rep.artifacts["duration_pdf"] = "duration_pdf.csv"

        max_lag = 48
        acf_rows = []
        for name, vals, lens in (("real", real.values, vr), ("gen", gen.values, vg)):
            for i, (c, n) in enumerate(zip(vals, lens)):
                if n > max_lag and np.ptp(c[:n]) > 0:
                    acf_rows.append([name, i, *evaluation.autocorrelation(c, max_lag, n)[1:]])
        evaluation.write_table(out / "acf.csv", ["source", "row"] + [f"lag{k}" for k in range(1, max_lag + 1)],
                               acf_rows)
        rep.artifacts["acf"] = "acf.csv"

        dens_r = evaluation.bulk_rate_density(real.values, vr, step_minutes=step)
        dens_g = evaluation.bulk_rate_density(gen.values, vg, step_minutes=step)
        evaluation.write_table(out / "bulk_density.csv", ["source", "rate", "density"],
                               [("real", x, y) for x, y in zip(dens_r.grid, dens_r.kde)]
                               + [("gen", x, y) for x, y in zip(dens_g.grid, dens_g.kde)])
        rep.artifacts["bulk_density"] = "bulk_density.csv"

    lo = min(real.values.min(), gen.values.min())
    hi = max(real.values.max(), gen.values.max())
    if hi > lo:
        pr, edges = np.histogram(real.values, ev.bins, (lo, hi))
        pg, _ = np.histogram(gen.values, ev.bins, (lo, hi))
        evaluation.write_table(out / "marginal_hist.csv", ["bin_start", "real", "gen"],
                               zip(edges[:-1], pr / pr.sum(), pg / pg.sum()))
        rep.artifacts["marginal_hist"] = "marginal_hist.csv"
    evaluation.export_projection_input(real.values, gen.values, out / "projection_input.csv")
    rep.artifacts["projection_input"] = "projection_input.csv"
    rep.write(out / "metrics.txt")
    _manifest(out, cfg, "evaluate")
    return rep


def cmd_bid(cfg: RunConfig, out: Path, scenarios_path: str) -> bidding.BiddingPlan:
    b = cfg.bidding
    curves = read_batch_csv(_require(scenarios_path, "scenario file")).values
    prices = bidding.read_prices(_require(b.prices, "price file"))
    rng = np.random.default_rng(cfg.stage_seed("bid"))

    k = b.k_reduce or min(b.n_evs, len(curves))
    reduced = bidding.reduce_scenarios(curves, k, seed=cfg.stage_seed("bid"))
    if b.arrivals:
        observed = np.loadtxt(_require(b.arrivals, "arrival file"), delimiter=",", skiprows=1, ndmin=1)
        arrivals = bidding.sample_arrivals(observed, len(reduced.curves), rng)
    else:
        arrivals = np.zeros(len(reduced.curves))
    inst = bidding.assemble_instance(
        reduced.curves, arrivals, prices, penalty_factor=b.penalty_factor,
        step_minutes=b.step_minutes, rate_unit=cfg.ingest.rate_unit, voltage=cfg.ingest.voltage, caps=b.cap_kw,
    )
    plan = bidding.solve_bidding(inst)
    bidding.write_plan(out, plan)
    _manifest(out, cfg, "bid", evs=len(inst.demands), intervals=inst.demands.shape[1])
    return plan


# -- argument handling ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--out", default=None, help="output directory (overrides paths.outputs)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration value")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="evdiffusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("ingest", parents=[common], help="build training corpora from session records")
    s.add_argument("--sessions")
    s = sub.add_parser("train", parents=[common], help="train the diffusion model")
    s.add_argument("--data")
    s.add_argument("--task", choices=["battery", "station"])
    s.add_argument("--epochs", type=int)
    s = sub.add_parser("sample", parents=[common], help="generate scenarios from a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("-n", type=int, default=100)
    s.add_argument("--label", type=int)
    s = sub.add_parser("evaluate", parents=[common], help="score generated against real scenarios")
    s.add_argument("--real", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--task", choices=["battery", "station"])
    s = sub.add_parser("bid", parents=[common], help="solve the day-ahead bidding program")
    s.add_argument("--scenarios", required=True)
    s.add_argument("--prices")
    s.add_argument("--arrivals")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.set:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.run.seed = args.seed
    for attr, dotted in (("sessions", "paths.sessions"), ("data", "paths.data"), ("checkpoint", "paths.checkpoint"),
                         ("task", "run.task"), ("epochs", "train.epochs"), ("prices", "bidding.prices"),
                         ("arrivals", "bidding.arrivals")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(dotted, str(value))
    if args.out is not None:
        cfg.paths.outputs = args.out
    if cfg.train.patience > cfg.train.epochs:
        cfg.train.patience = cfg.train.epochs
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = os.environ.get(WORKERS_ENV)
    if workers:
        torch.set_num_threads(int(workers))
    try:
        cfg = resolve_config(args)
        out = Path(cfg.paths.outputs)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "ingest":
            cmd_ingest(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "sample":
            cmd_sample(cfg, out, args.n, args.label)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, args.real, args.gen)
        elif args.command == "bid":
            cmd_bid(cfg, out, args.scenarios)
    except (CommandError, ingest.IngestError, ValueError, OSError) as exc:
        print(f"evdiffusion {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
