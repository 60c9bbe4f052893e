"""Command-line entry point: ``hetseg <command>``.

Commands: synth, train, eval, infer, gradcheck, report. Global flags
(``--config``, ``--seed``, ``--deterministic``, ``--out``) go before the
command. Without ``--out`` results land in ``$SEGHEH_CACHE`` (or
``./hetseg-out``).

Exit codes: 0 success, 1 validation/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .core import LABEL_KEYS, ConfigError, HetsegError, NumericalError, write_json, write_volume

CACHE_ENV = "SEGHEH_CACHE"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(CACHE_ENV) or "hetseg-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv(value: str | None) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.deterministic:
        cfg = replace(cfg, train=replace(cfg.train, deterministic=True))
    return cfg


# ---------------------------------------------------------------------------
# commands


def suite_summary(manifests) -> str:
    """Dataset table: subject counts, format and label availability."""
    cols = ["all_t1", "all_t2", "new_t2", "vanish_t2"]
    lines = [f"{'dataset':<10} {'train':>5} {'test':>5}  {'format':<15} " + " ".join(f"{c:>9}" for c in cols)]
    for m in manifests:
        n_train, n_test = len(m.records_in("train")), len(m.records_in("test"))
        marks = " ".join(f"{('yes' if m.availability[c] else '-'):>9}" for c in cols)
        lines.append(f"{m.name:<10} {n_train:>5} {n_test:>5}  {m.format:<15} {marks}")
    return "\n".join(lines)


def cmd_synth(args, cfg: RunConfig) -> int:
    from .phantom import generate_suite

    n = args.subjects if args.subjects is not None else cfg.n_subjects
    out = _out_dir(args)
    manifests = generate_suite(cfg.phantom, n, out, cfg.test_fraction)
    cfg.save(out / "run_config.json")
    print(suite_summary(manifests))
    return EXIT_OK


def _train_config(args, cfg: RunConfig):
    from .experiments import ablate

    train = cfg.train
    if args.folds is not None:
        train = replace(train, folds=args.folds)
    if args.epochs is not None:
        train = replace(train, n_epoch=args.epochs)
    ablated = _csv(args.ablate_loss)
    bad = set(ablated) - {"long", "vol", "spat"}
    if bad:
        raise ConfigError(f"unknown loss term(s) {sorted(bad)}")
    if ablated:
        train = replace(train, weights=ablate(train.weights, ablated))
    return train


def cmd_train(args, cfg: RunConfig) -> int:
    from .phantom import load_suite
    from .trainer import train_ensemble

    manifests = load_suite(args.suite)
    wanted = _csv(args.datasets)
    if wanted:
        unknown = set(wanted) - {m.name for m in manifests}
        if unknown:
            raise ConfigError(f"unknown dataset(s) {sorted(unknown)}")
        manifests = [m for m in manifests if m.name in wanted]
    train = _train_config(args, cfg)
    out = _out_dir(args)
    paths = train_ensemble(manifests, cfg.model, train, out)
    replace(cfg, train=train).save(out / "run_config.json")
    print(f"trained {len(paths)} model(s) into {out}")
    return EXIT_OK


def _checkpoint_paths(path) -> list[Path]:
    from .trainer import CHECKPOINT_MANIFEST

    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_MANIFEST
    if p.suffix == ".json":
        doc = json.loads(p.read_text())
        return [p.parent / m["path"] for m in doc["members"]]
    return [p]


def cmd_eval(args, cfg: RunConfig) -> int:
    from .experiments import series_trajectories, trajectory_series
    from .metrics import compare_reports, evaluate_suite, format_table, plot_trajectories
    from .model import load_checkpoint
    from .phantom import load_suite

    manifests = load_suite(args.suite)
    oracle = load_suite(args.suite, oracle=True)
    tasks = _csv(args.tasks) or None
    opts = cfg.metrics
    paths = _checkpoint_paths(args.checkpoints)
    report = evaluate_suite(paths, manifests, oracle, tasks, overlap=opts.overlap, **opts.metric_kwargs())
    out = _out_dir(args)
    text = format_table(report)
    n_series = args.series if args.series is not None else cfg.series_subjects
    if n_series > 0:
        nets = [load_checkpoint(p)[0] for p in paths]
        series = trajectory_series(cfg.phantom, n_series, cfg.series_timepoints, seed=cfg.seed + 7)
        traj = {}
        for k, net in enumerate(nets):
            for rec, rep in zip(series, series_trajectories(net, series)):
                traj[f"{rec.subject_id}/m{k}"] = rep
        report["trajectories"] = {
            k: {"pred_ml": [v / 1000 for v in r.pred_volumes], "gt_ml": [v / 1000 for v in r.gt_volumes],
                "rho": None if not r.defined else r.rho}
            for k, r in traj.items()
        }
        plot_trajectories(traj, out / "trajectories.svg")
    if args.compare:
        other = evaluate_suite(_checkpoint_paths(args.compare), manifests, oracle, tasks, overlap=opts.overlap,
                               **opts.metric_kwargs())
        report["comparison"] = compare_reports(report, other)
        lines = ["", "paired t-test (this vs --compare):"]
        for row in report["comparison"]:
            p = "N/A" if row["p"] is None else f"{row['p']:.4f}{row['stars']}"
            lines.append(f"  {row['dataset']}/{row['task']}/{row['metric']}: p = {p}")
        text += "\n".join(lines) + "\n"
    write_json(report, out / "report.json")
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    from .core import load_manifest
    from .trainer import predict

    manifest = load_manifest(args.manifest)
    paths = _checkpoint_paths(args.checkpoints)
    out = _out_dir(args)
    records = [manifest.record(args.subject)] if args.subject else list(manifest.records)
    for rec in records:
        for (i, j), pb in predict(paths, rec, manifest.availability, cfg.metrics.overlap):
            d = out / rec.subject_id
            d.mkdir(parents=True, exist_ok=True)
            for head, v in zip(("p_a_t1", "p_a_t2", "p_n_t2", "p_v_t2"), pb.volumes()):
                write_volume(v, d / f"pair{i}-{j}_{head}.nii")
    print(f"wrote predictions for {len(records)} subject(s) into {out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import CASES, check_loss

    names = _csv(args.loss) or list(CASES)
    unknown = set(names) - set(CASES)
    if unknown:
        raise ConfigError(f"unknown loss(es) {sorted(unknown)}; choose from {sorted(CASES)}")
    results = [check_loss(n, n_instances=args.instances, seed=cfg.seed, tol=args.tol) for n in names]
    for r in results:
        print(r.describe())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_report(args, cfg: RunConfig) -> int:
    from .metrics import ablation_table, format_ablation, plot_ablation

    reports = {}
    for spec in args.reports:
        label, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"expected LABEL=PATH, got {spec!r}")
        reports[label] = json.loads(Path(path).read_text())
    out = _out_dir(args)
    text = ""
    for metric in ("dice", "f1"):
        table = ablation_table(reports, metric)
        text += f"{metric}\n" + format_ablation(table) + "\n"
        plot_ablation(table, out / f"ablation_{metric}.svg", title=f"Ablation ({metric})")
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetseg", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="seed for synthesis and training")
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic training")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the five phantom datasets")
    s.add_argument("--subjects", type=int, help="subjects per dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a k-fold ensemble")
    s.add_argument("--suite", required=True, help="directory written by synth")
    s.add_argument("--folds", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--ablate-loss", help="comma list of constraint terms to disable: long,vol,spat")
    s.add_argument("--datasets", help="comma list of dataset names to train on")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score checkpoints on the test split")
    s.add_argument("--suite", required=True)
    s.add_argument("--checkpoints", required=True, help="checkpoint directory, manifest or file")
    s.add_argument("--compare", help="second checkpoint set for paired t-tests")
    s.add_argument("--tasks", help=f"comma list from {','.join(LABEL_KEYS)}")
    s.add_argument("--series", type=int, help="number of multi-timepoint phantoms for trajectories")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="write prediction volumes for a manifest")
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--subject")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    s.add_argument("--loss", help="comma list from dice,long,vol,spat")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="ablation tables and charts from report JSON files")
    s.add_argument("reports", nargs="+", metavar="LABEL=PATH")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args)
        return args.func(args, cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (HetsegError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
