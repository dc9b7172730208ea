"""Command-line shell: collect, train, navigate, serve, report.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import kinodyn as kd
from . import reporting
from .config import Config, ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ABLATION_MODES = ["none-v", "none-i", "none-vi", "none-vs", "none-is", "none-vsi", "tron-i", "tron-vs", "tron-vsi"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="TOML config path (defaults built in)")
    p.add_argument("--seed", type=int, default=11, help="master seed")
    p.add_argument("--out", type=str, default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cahsor", description="competence-aware off-road navigation stack")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="drive the simulator and record an interaction dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train the representation or the prediction heads")
    _add_common(p)
    p.add_argument("--stage", choices=["tron", "kd"], required=True)
    p.add_argument("--data", type=str, required=True, help="dataset directory from collect")
    p.add_argument("--mode", type=str, default="tron-vs", help="kd mode, e.g. tron-vsi, none-v")
    p.add_argument("--tron-ckpt", type=str, default=None, help="pretrained checkpoint for kd with tron/sterling")
    p.add_argument("--speed-free", action="store_true", help="tron stage: correlate vision with inertia only")
    p.add_argument("--ablation", action="store_true", help="kd stage: train the whole mode matrix")

    p = sub.add_parser("navigate", help="run the waypoint benchmark")
    _add_common(p)
    p.add_argument("--methods", type=str, default="vanilla,cahsor,slow,slow+cahsor")
    p.add_argument("--laps", type=int, default=None)
    p.add_argument("--models", type=str, default=None, help="tron-vs model bundle directory")

    p = sub.add_parser("serve", help="host the shared-control teleoperation service")
    _add_common(p)
    p.add_argument("--models", type=str, required=True, help="tron-vsi model bundle directory")
    p.add_argument("--bind", type=str, default=None, help="host:port override")

    p = sub.add_parser("report", help="render report JSON as text/CSV tables")
    _add_common(p)
    p.add_argument("--input", type=str, required=True, help="report JSON (ablation or navigation)")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    return parser


def cmd_collect(args, config: Config) -> int:
    from .dataset import collect_dataset

    manifest = collect_dataset(config, seed=args.seed, out_dir=args.out)
    print(f"collected {manifest.record_count} records into {args.out}")
    print(f"manifest hash {manifest.hash}")
    return EXIT_OK


def cmd_train(args, config: Config) -> int:
    from . import tron as tron_mod
    from .dataset import load_dataset, tron_view

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(args.data)
    n_train = kd.split_blocks(len(ds))[0].size
    if args.stage == "tron":
        from dataclasses import replace

        cfg = config.tron_config(seed=args.seed)
        if args.speed_free:
            cfg = replace(cfg, correlate_speed=False)
        model, history = tron_mod.train_tron(tron_view(ds, limit=n_train), cfg, log_path=out / "tron_log.csv")
        model.save(out / "tron.ckpt")
        print(f"trained representation: final loss {history.epochs[-1]['mean_loss']:.3f} -> {out/'tron.ckpt'}")
        return EXIT_OK
    cfg = config.kd_config(seed=args.seed)
    pretrained = {}
    if args.tron_ckpt:
        if not Path(args.tron_ckpt).exists():
            raise ConfigError(f"pretrained checkpoint not found: {args.tron_ckpt}")
        model = tron_mod.TronModel.load(args.tron_ckpt)
        pretrained["tron" if model.config.correlate_speed else "sterling"] = model
    if args.ablation:
        modes = [kd.ModelMode.parse(m) for m in ABLATION_MODES if m.startswith("none-") or pretrained]
        modes = [m for m in modes if m.pretraining == "none" or m.pretraining in pretrained]
        reports = kd.ablation_suite(ds, modes, cfg, pretrained=pretrained)
        (out / "ablation.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
        print(reporting.render_eval_table(reports))
        return EXIT_OK
    mode = kd.ModelMode.parse(args.mode)
    if mode.pretraining != "none" and mode.pretraining not in pretrained:
        raise ConfigError(f"mode {mode.key} needs --tron-ckpt pointing at a pretrained checkpoint")
    model, report = kd.train_kd(ds, mode, cfg, pretrained=pretrained.get(mode.pretraining))
    bundle = out / f"kd_{mode.key}"
    model.save_bundle(bundle)
    (bundle / "eval.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(f"trained {mode.key}: combined test MSE {report.combined:.4f} (baseline {report.baseline_combined:.4f})")
    print(f"bundle -> {bundle}")
    return EXIT_OK


def cmd_navigate(args, config: Config) -> int:
    from .navigate import run_benchmark

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    model = None
    if any("cahsor" in m for m in methods):
        if args.models is None:
            raise ConfigError("gated methods need --models pointing at a tron-vs bundle")
        model = kd.KdModel.load_bundle(args.models)
    report = run_benchmark(config, methods, model, seed=args.seed, laps=args.laps, out_dir=args.out)
    print(reporting.render_run_table(report))
    print(f"report -> {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_serve(args, config: Config) -> int:
    import uvicorn

    from .service import create_app

    host = config.service["host"]
    port = int(config.service["port"])
    if args.bind:
        host, _, port_s = args.bind.rpartition(":")
        port = int(port_s)
        host = host or "127.0.0.1"
    app = create_app(config, args.models)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return EXIT_OK


def cmd_report(args, config: Config) -> int:
    payload = json.loads(Path(args.input).read_text())
    if isinstance(payload, list):  # ablation reports
        reports = [
            kd.EvalReport(
                mode=r["mode"],
                mse=r["mse"],
                combined=r["combined"],
                baseline_combined=r["baseline_combined"],
                n_train=r["n_train"],
                n_test=r["n_test"],
                epochs_run=r["epochs_run"],
            )
            for r in payload
        ]
        print(reporting.eval_reports_csv(reports) if args.format == "csv" else reporting.render_eval_table(reports))
        return EXIT_OK
    print(reporting.run_report_csv(payload) if args.format == "csv" else reporting.render_run_table(payload))
    return EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "navigate": cmd_navigate,
    "serve": cmd_serve,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary of the program
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
