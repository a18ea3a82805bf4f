"""Command-line entry point: ``hetadmit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import tomli

from . import __version__
from .calibration import (
    CollaborationOverhead,
    FitResult,
    calibrate_device,
    estimate_max_concurrency,
    fine_tune_depths,
    fit_latency_model,
    load_profile_csv,
    run_stress_test,
)
from .cost import cost_report
from .domain import CostInputs, DeviceKind, FleetConfig, LatencyModel, QueuePlan, Slo, load_config
from .errors import ConfigError, HetAdmitError
from .gateway import GatewayConfig, resolve_plan, serve
from .report import render_report
from .simulation import SimulatedDevice, WorkloadSpec, simulate

logger = logging.getLogger(__name__)


def _emit(doc: dict[str, Any], out: str | None, text: str | None = None) -> None:
    payload = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(payload)
    print(text if text is not None else payload, end="" if text is None else "\n")


def _slo(args: argparse.Namespace, config=None) -> Slo:
    if getattr(args, "slo", None) is not None:
        return Slo(args.slo)
    if config is not None and config.slo is not None:
        return config.slo
    raise ConfigError("an SLO is required (--slo or [slo] in the config)")


def _load_structured(path: str) -> dict[str, Any]:
    p = Path(path)
    try:
        if p.suffix == ".json":
            return json.loads(p.read_text())
        with p.open("rb") as fh:
            return tomli.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _sim_device(args: argparse.Namespace) -> SimulatedDevice:
    if args.alpha is None or args.beta is None:
        raise ConfigError("--alpha and --beta are required for a simulated device")
    return SimulatedDevice.from_params(args.alpha, args.beta, args.noise, args.seed)


def cmd_calibrate(args: argparse.Namespace) -> int:
    if args.csv:
        fit = fit_latency_model(load_profile_csv(args.csv))
    else:
        fit = calibrate_device(_sim_device(args), Slo(args.slo), points=args.points)
    doc = {"kind": "fit", "device": args.name, **fit.to_dict()}
    _emit(doc, args.out)
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    if args.config:
        config = load_config(args.config)
        slo = _slo(args, config)
        depths = {p.name: int(estimate_max_concurrency(p.latency, slo)) for p in config.fleet}
        text = "\n".join(f"{name}\t{d}" for name, d in depths.items())
    else:
        if args.fit:
            model = FitResult.from_dict(_load_structured(args.fit)).model
        elif args.alpha is not None and args.beta is not None:
            model = LatencyModel(args.alpha, args.beta)
        else:
            raise ConfigError("give --alpha/--beta, --fit or --config")
        slo = _slo(args)
        depth = estimate_max_concurrency(model, slo)
        if depth.unbounded:
            logger.warning("latency does not grow with concurrency; depth capped at %d", depth)
        depths = {args.name: int(depth)}
        text = str(int(depth))
    doc = {"kind": "estimate", "slo": slo.max_latency, "depths": depths}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(text)
    return 0


def cmd_stress(args: argparse.Namespace) -> int:
    depth = run_stress_test(_sim_device(args), Slo(args.slo), args.step)
    doc = {"kind": "stress", "device": args.name, "slo": args.slo, "step": args.step,
           "seed": args.seed, "depth": depth}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(depth)
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    slo = _slo(args, config)
    fleet = config.fleet
    hetero = not args.no_heterogeneous
    if args.accel_depth is not None or args.cpu_depth is not None:
        initial = QueuePlan(args.accel_depth or 0, (args.cpu_depth or 0) if hetero else 0, hetero)
    else:
        initial = resolve_plan(FleetConfig(fleet, slo, config.plan, config.seed), "auto", hetero)
    overhead = CollaborationOverhead(args.accel_alpha_scale, args.accel_beta_shift,
                                     args.cpu_alpha_scale, args.cpu_beta_shift)
    tuned = fine_tune_depths(initial, fleet, slo, args.radius, overhead, batches=args.batches, seed=args.seed)
    doc = {
        "kind": "finetune",
        "slo": slo.max_latency,
        "radius": args.radius,
        "seed": args.seed,
        "devices": {
            "accelerator": fleet.accelerator.name if fleet.accelerator else None,
            "cpu": fleet.cpu.name if fleet.cpu else None,
        },
        "initial": initial.to_dict(),
        "tuned": tuned.to_dict(),
    }
    _emit(doc, args.out)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    slo = _slo(args, config)
    workload = WorkloadSpec.from_dict(_load_structured(args.workload))
    if args.seed is not None:
        workload = WorkloadSpec(workload.mode, workload.query_length, args.seed)
    if args.plan:
        try:
            acc, cpu = (int(x) for x in args.plan.split(","))
        except ValueError:
            raise ConfigError(f"--plan must look like ACC,CPU, got {args.plan!r}") from None
        plan = QueuePlan(acc, cpu, cpu > 0 or fleet_is_cpu_only(config))
    else:
        plan = resolve_plan(FleetConfig(config.fleet, slo, config.plan, config.seed), "auto", True)
    metrics = simulate(config.fleet, plan, workload, slo, outlier_fraction=args.outlier_fraction)
    doc = {
        "kind": "metrics",
        "slo": slo.max_latency,
        "plan": plan.to_dict(),
        "workload": workload.to_dict(),
        "metrics": metrics.to_dict(),
    }
    _emit(doc, args.out)
    return 0


def fleet_is_cpu_only(config) -> bool:
    return config.fleet.kinds == {DeviceKind.CPU}


def cmd_cost(args: argparse.Namespace) -> int:
    inputs = None
    section: dict[str, Any] = {}
    if args.config:
        data = _load_structured(args.config)
        section = dict(data.get("cost", {}))
        if "slo" not in section and "slo" in data:
            section["slo"] = data["slo"]
    flag_map = {
        "queries_per_second": args.qps, "peak_queries": args.peak, "throughput": args.throughput,
        "max_concurrency": args.max_concurrency, "devices_per_instance": args.devices,
        "price_per_device": args.price, "mean_processing": args.mean_processing,
    }
    section.update({k: v for k, v in flag_map.items() if v is not None})
    if args.slo is not None:
        section["slo"] = {"max_latency_s": args.slo}
    if section:
        try:
            inputs = CostInputs.from_dict(section)
        except KeyError as exc:
            raise ConfigError(f"cost inputs incomplete, missing {exc}") from None
    report = cost_report(args.c_cpu, args.c_accel, inputs)
    doc = {"kind": "cost", "c_cpu": args.c_cpu, "c_accel": args.c_accel, "report": report.to_dict()}
    if inputs is not None:
        doc["inputs"] = inputs.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    r = report.to_dict()
    lines = [f"peak savings: {r['peak_savings_pct']}", f"throughput gain: {r['throughput_gain_pct']}"]
    if inputs is not None:
        lines += [f"average-sizing cost: {r['average_strategy_cost']:.2f}",
                  f"peak-sizing cost: {r['peak_strategy_cost']:.2f}",
                  f"waiting slots: {r['waiting_slots']}"]
    print("\n".join(lines))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    if args.plan == "auto":
        plan: QueuePlan | str = "auto"
    else:
        acc, cpu = (int(x) for x in args.plan.split(","))
        plan = QueuePlan(acc, cpu if not args.no_heterogeneous else 0, not args.no_heterogeneous)
    gw = GatewayConfig(
        config_path=args.config, host=args.host, port=args.port, plan=plan,
        heterogeneous=not args.no_heterogeneous, seed=args.seed, backend=args.backend,
        command=args.command or [], time_scale=args.time_scale, request_log=args.request_log,
        metrics_path=args.metrics_out, metrics_flush_interval=args.metrics_interval,
    )
    serve(gw)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    text = render_report(args.run_dir)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _add_device_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, help="seconds per concurrent query")
    p.add_argument("--beta", type=float, help="fixed latency in seconds")
    p.add_argument("--noise", type=float, default=0.0, help="latency jitter stddev in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="device")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetadmit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("calibrate", help="fit the latency line from a CSV or a simulated device")
    p.add_argument("--csv", help="profiling CSV with header concurrency,latency_s")
    _add_device_args(p)
    p.add_argument("--slo", type=float, default=1.0)
    p.add_argument("--points", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("estimate", help="largest SLO-safe concurrency per device")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--fit", help="FitResult JSON from calibrate")
    p.add_argument("--config", help="fleet config; estimates every device")
    p.add_argument("--slo", type=float)
    p.add_argument("--name", default="device")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("stress", help="incremental stress test on a simulated device")
    _add_device_args(p)
    p.add_argument("--slo", type=float, required=True)
    p.add_argument("--step", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("finetune", help="refine queue depths with collaborative simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--slo", type=float)
    p.add_argument("--accel-depth", type=int)
    p.add_argument("--cpu-depth", type=int)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-heterogeneous", action="store_true")
    p.add_argument("--accel-alpha-scale", type=float, default=1.0)
    p.add_argument("--accel-beta-shift", type=float, default=0.0)
    p.add_argument("--cpu-alpha-scale", type=float, default=1.0)
    p.add_argument("--cpu-beta-shift", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("simulate", help="run a workload through the simulated system")
    p.add_argument("--config", required=True)
    p.add_argument("--workload", required=True, help="workload file (TOML or JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--slo", type=float)
    p.add_argument("--plan", help="ACC,CPU depths; default is the config plan or estimates")
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cost", help="deployment cost and offload savings")
    p.add_argument("--c-cpu", type=int, required=True)
    p.add_argument("--c-accel", type=int, required=True)
    p.add_argument("--config", help="file with a [cost] section")
    p.add_argument("--qps", type=float)
    p.add_argument("--peak", type=float)
    p.add_argument("--throughput", type=float)
    p.add_argument("--max-concurrency", type=int)
    p.add_argument("--devices", type=int)
    p.add_argument("--price", type=float)
    p.add_argument("--mean-processing", type=float)
    p.add_argument("--slo", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("serve", help="run the HTTP gateway")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--plan", default="auto", help="'auto' or ACC,CPU")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-heterogeneous", action="store_true")
    p.add_argument("--backend", choices=["simulated", "command"], default="simulated")
    p.add_argument("--command", nargs=argparse.REMAINDER, help="worker command for the command backend")
    p.add_argument("--time-scale", type=float, default=1.0)
    p.add_argument("--request-log")
    p.add_argument("--metrics-out")
    p.add_argument("--metrics-interval", type=float, default=0.0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="Markdown summary of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HetAdmitError, ValueError, OSError) as exc:
        print(f"hetadmit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
