"""Command-line entry point.

Subcommands:
  run            execute one federated run from a JSON config
  sweep-ratio    repeat a run over a list of connected-user ratios
  sweep-epsilon  repeat a run over a list of loss-mixing coefficients
  eval-table     recompute win/tie/lose/best, MeanACC and AVG_rank from an
                 accuracy CSV (datasets x algorithms)
  gradcheck      self-check: finite-difference verification of the network
                 gradients

Config schema (JSON object): strategy, n_tot, conn_ratio, fles, seed,
epsilon, batch_size, lr, weight_decay, bn_paper_literal, datasets (list of
{"name": ..., "path": ...}; a bare name resolves under EFDLS_DATA_DIR; path
"synthetic" uses the built-in separable set), output_dir, plus the optional
keys documented in the README (local_epochs, blocks, hidden_dim, normalize,
teacher_bn_mode, conn_resample, transport, port, workers).

A run writes <out>/effective-config, <out>/results.csv and <out>/summary.json;
sweeps add <out>/sweep.csv. Existing outputs are never overwritten unless
--force is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import extractor, fbst, federation, metrics, nncore

DATA_DIR_ENV = "EFDLS_DATA_DIR"
GRADCHECK_TOLERANCE = 1e-4


def _resolve_dataset_entry(entry, data_dir: str | None):
    if isinstance(entry, str):
        entry = {"name": entry, "path": entry}
    if isinstance(entry, dict):
        name, path = entry["name"], entry.get("path", entry["name"])
    else:
        name, path = entry
    if path != "synthetic" and not os.path.isabs(path) and not os.path.isdir(path):
        if data_dir:
            candidate = os.path.join(data_dir, path)
            if os.path.isdir(candidate):
                path = candidate
    return {"name": name, "path": path}


def load_config(path: str, overrides: dict) -> federation.FederationConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    data_dir = os.environ.get(DATA_DIR_ENV)
    raw["datasets"] = [_resolve_dataset_entry(e, data_dir) for e in raw.get("datasets", [])]
    if "blocks" in raw:
        raw["blocks"] = tuple(tuple(b) for b in raw["blocks"])
    return federation.FederationConfig.from_dict(raw)


def _refuse_overwrite(out_dir: str, names, force: bool) -> None:
    clashes = [n for n in names if os.path.exists(os.path.join(out_dir, n))]
    if clashes and not force:
        raise FileExistsError(
            f"output files already exist in {out_dir}: {clashes} (use --force to overwrite)"
        )


def _execute_run(config: federation.FederationConfig, out_dir: str):
    """Run the federation and assemble the summary payload."""
    loss_trace = {}

    def on_epoch(user_id, k, report):
        loss_trace.setdefault(user_id, []).append(report)

    report, ledger = federation.run_federation(config, on_epoch=on_epoch)

    upload = ledger.total_bytes("upload")
    download = ledger.total_bytes("download")
    bundle_bytes = next((e.nbytes for e in ledger.entries), None)
    expected = None
    if bundle_bytes is not None:
        expected = federation.comm_overhead(bundle_bytes, config.fles, config.n_conn)
    per_user = {name: float(acc) for name, acc in
                zip(report.table.datasets, report.table.values[:, 0])}
    final_loss = {}
    for uid, reports in sorted(loss_trace.items()):
        final_loss[report.table.datasets[uid]] = reports[-1].total
    summary = {
        "strategy": config.strategy,
        "seed": config.seed,
        "n_tot": config.n_tot,
        "n_conn": config.n_conn,
        "fles": config.fles,
        "algorithms": metrics.summary_dict(report),
        "per_user": per_user,
        "final_train_loss": final_loss,
        "comm": {
            "upload_bytes": upload,
            "download_bytes": download,
            "total_bytes": upload + download,
            "bundle_bytes": bundle_bytes,
            "expected_total_bytes": expected,
        },
    }
    return report, ledger, summary


def _write_run_outputs(config, report, summary, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective-config"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")
    metrics.write_accuracy_csv(report.table, os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")


def cmd_run(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    out_dir = args.out or config.output_dir
    if not out_dir:
        print("error: no output directory (give --out or set output_dir)", file=sys.stderr)
        return 2
    config.output_dir = out_dir
    os.makedirs(out_dir, exist_ok=True)
    _refuse_overwrite(out_dir, ("effective-config", "results.csv", "summary.json"), args.force)
    report, _, summary = _execute_run(config, out_dir)
    _write_run_outputs(config, report, summary, out_dir)
    mean = summary["algorithms"][config.strategy]["mean_acc"]
    print(f"strategy={config.strategy} n_tot={config.n_tot} n_conn={config.n_conn} "
          f"fles={config.fles} mean_acc={mean:.4f}")
    print(f"outputs written to {out_dir}")
    return 0


def _sweep(args, parameter: str, values) -> int:
    base = load_config(args.config, _config_overrides(args))
    out_dir = args.out or base.output_dir
    if not out_dir:
        print("error: no output directory (give --out or set output_dir)", file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    _refuse_overwrite(out_dir, ("sweep.csv",), args.force)
    rows = []
    failures = 0
    for value in values:
        setting_dir = os.path.join(out_dir, f"{parameter}_{value:g}")
        overrides = _config_overrides(args)
        overrides["conn_ratio" if parameter == "ratio" else "epsilon"] = value
        try:
            config = load_config(args.config, overrides)
            config.output_dir = setting_dir
            os.makedirs(setting_dir, exist_ok=True)
            _refuse_overwrite(setting_dir, ("effective-config", "results.csv", "summary.json"),
                              args.force)
            report, _, summary = _execute_run(config, setting_dir)
            _write_run_outputs(config, report, summary, setting_dir)
            losses = summary["final_train_loss"].values()
            rows.append({
                "parameter": parameter,
                "value": value,
                "n_conn": config.n_conn,
                "mean_acc": summary["algorithms"][config.strategy]["mean_acc"],
                "mean_final_loss": sum(losses) / len(losses) if losses else "",
                "error": "",
            })
            print(f"{parameter}={value:g}: n_conn={config.n_conn} "
                  f"mean_acc={rows[-1]['mean_acc']:.4f}")
        except Exception as exc:
            failures += 1
            rows.append({"parameter": parameter, "value": value, "n_conn": "",
                         "mean_acc": "", "mean_final_loss": "", "error": str(exc)})
            print(f"{parameter}={value:g}: failed ({exc})", file=sys.stderr)
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["parameter", "value", "n_conn",
                                                "mean_acc", "mean_final_loss", "error"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep results written to {os.path.join(out_dir, 'sweep.csv')}")
    return 1 if failures == len(values) else 0


def cmd_sweep_ratio(args) -> int:
    return _sweep(args, "ratio", _parse_float_list(args.ratios, "ratios"))


def cmd_sweep_epsilon(args) -> int:
    return _sweep(args, "epsilon", _parse_float_list(args.epsilons, "epsilons"))


def cmd_eval_table(args) -> int:
    try:
        table = metrics.load_accuracy_csv(args.table)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report = metrics.MetricReport.from_table(table)
    header = f"{'algorithm':<12} {'win':>4} {'tie':>4} {'lose':>5} {'best':>5} {'mean_acc':>9} {'avg_rank':>9}"
    print(header)
    for a in table.algorithms:
        mean = report.mean_acc[a]
        if report.win is None:
            print(f"{a:<12} {'-':>4} {'-':>4} {'-':>5} {'-':>5} {mean:>9.4f} {'-':>9}")
        else:
            print(f"{a:<12} {report.win[a]:>4} {report.tie[a]:>4} {report.lose[a]:>5} "
                  f"{report.best[a]:>5} {mean:>9.4f} {report.avg_rank[a]:>9.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _refuse_overwrite(args.out, ("results.csv", "summary.json"), args.force)
        metrics.emit_report(report, args.out)
    if report.win is None:
        print("error: win/tie/lose and ranks need at least 2 algorithm columns",
              file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for trial in range(args.trials):
        rng = np.random.default_rng([args.seed, trial])
        model = extractor.FeatureExtractor(
            num_classes=3, blocks=((3, 6), (3, 8), (3, 6)), hidden_dim=6,
            seed=[args.seed, trial, 1])
        x = rng.standard_normal((3, 1, 16))
        labels = rng.integers(0, 3, size=3)
        teacher = extractor.clone_model(model)
        teacher_trace = teacher.forward(x, training=True, update_running=False)
        for loss in (fbst.SupervisedLoss(labels),
                     fbst.DistillationLoss(teacher_trace, labels, epsilon=0.9)):
            err = nncore.finite_diff_gradcheck(model, x, loss, epsilon=args.fd_epsilon)
            worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"gradcheck: {args.trials} trials, max relative error {worst:.3e} "
          f"({'OK' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if ok else 1


def _parse_float_list(text: str, what: str):
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise SystemExit(f"error: --{what} expects a comma-separated list of numbers")
    if not values:
        raise SystemExit(f"error: --{what} is empty")
    return values


def _config_overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed", None),
        "strategy": getattr(args, "strategy", None),
        "conn_ratio": getattr(args, "ratio", None),
        "epsilon": getattr(args, "epsilon", None),
        "fles": getattr(args, "fles", None),
        "transport": getattr(args, "transport", None),
        "port": getattr(args, "port", None),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efdls",
        description="Federated distillation simulator for multi-task time series classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config file")
            p.add_argument("--out", help="output directory (overrides config output_dir)")
            p.add_argument("--seed", type=int, help="override the run seed")
            p.add_argument("--strategy", choices=("baseline", "fedavg", "fkd", "efdls"),
                           help="override the aggregation strategy")
            p.add_argument("--ratio", type=float, help="override conn_ratio")
            p.add_argument("--epsilon", type=float, help="override the loss-mixing epsilon")
            p.add_argument("--fles", type=int, help="override the number of federated epochs")
            p.add_argument("--transport", choices=("inproc", "socket"),
                           help="message transport (socket uses loopback TCP)")
            p.add_argument("--port", type=int, help="socket transport port (0 = ephemeral)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p_run = sub.add_parser("run", help="execute one federated run")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sr = sub.add_parser("sweep-ratio", help="run once per connected-user ratio")
    add_common(p_sr)
    p_sr.add_argument("--ratios", required=True, help="comma-separated ratios, e.g. 0.4,0.6,0.8,1.0")
    p_sr.set_defaults(func=cmd_sweep_ratio)

    p_se = sub.add_parser("sweep-epsilon", help="run once per loss-mixing epsilon")
    add_common(p_se)
    p_se.add_argument("--epsilons", required=True, help="comma-separated epsilons, e.g. 0.5,0.9")
    p_se.set_defaults(func=cmd_sweep_epsilon)

    p_et = sub.add_parser("eval-table", help="recompute metrics from an accuracy CSV")
    p_et.add_argument("table", help="CSV with a dataset column plus one column per algorithm")
    p_et.add_argument("--out", help="also emit results.csv/summary.json here")
    p_et.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p_et.set_defaults(func=cmd_eval_table)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--trials", type=int, default=3)
    p_gc.add_argument("--fd-epsilon", type=float, default=1e-5)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (fbst.ConfigError, federation.MalformedMessageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # dataset/numeric failures carry their context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
