"""Command-line front end: dcop, tran, and bench subcommands.

Exit status: 0 on success, 1 on solver failure, 2 on bad flags or inputs.
All solver defaults (see ddcosim.defaults) are overridable by flag; the
DDCOSIM_WORKERS environment variable overrides the worker count.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .bench import benchmark, write_bench_csv
from .circuit import CircuitTolerances
from .cosim import (CoupledSystem, Orchestrator, SimulationError,
                    TransientOptions)
from .defaults import DT_MAX, DT_MIN, SolverDefaults
from .device import NewtonError, NewtonTolerances
from .deviceconfig import DeviceConfigError, build_device, parse_device_config
from .netlist import NetlistError, parse_netlist
from .runtime import LteParams, PoolConfig, WorkerPool

log = logging.getLogger("ddcosim")


@dataclass
class RunConfig:
    netlist_path: Path
    device_paths: dict = field(default_factory=dict)  # ref -> path override
    t_end: float = 0.0
    dt_min: float = DT_MIN
    dt_max: float = DT_MAX
    dt_init: float | None = None
    adapt: bool = True
    newton: NewtonTolerances = field(default_factory=NewtonTolerances)
    circuit_tol: CircuitTolerances = field(default_factory=CircuitTolerances)
    lte: LteParams = field(default_factory=LteParams)
    threads: int = 1
    processes: int = 0
    threads_per_process: int = 1
    output: Path | None = None
    signals: list | None = None

    def validate(self, need_t_end: bool):
        if self.dt_min > self.dt_max:
            raise ValueError("dt-min must not exceed dt-max")
        if need_t_end and self.t_end <= 0.0:
            raise ValueError("t-end must be positive")
        if not self.netlist_path.exists():
            raise FileNotFoundError(f"netlist not found: {self.netlist_path}")


def load_system(config: RunConfig) -> CoupledSystem:
    """Parse the netlist, then each referenced device description."""
    text = config.netlist_path.read_text(encoding="utf-8")
    circuit = parse_netlist(text, source=str(config.netlist_path))
    devices = {}
    base = config.netlist_path.parent
    for port in circuit.device_ports:
        ref = port.device_ref
        path = Path(config.device_paths.get(ref, ref))
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            line = _port_line(text, port.name)
            raise NetlistError(
                f"device config {ref!r} not found (looked at {path})",
                line, 0, str(config.netlist_path))
        spec, profile, models = parse_device_config(
            path.read_text(encoding="utf-8"), source=str(path))
        devices[port.name] = build_device(port.name, spec, profile, models)
    return CoupledSystem(circuit, devices)


def _port_line(text: str, port_name: str) -> int:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.split("#", 1)[0].strip().startswith(port_name):
            return lineno
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("netlist", help="netlist file (.cir)")
    p.add_argument("--device", action="append", default=[], metavar="REF=PATH",
                   help="override a device-config reference with a path")
    p.add_argument("--dt-min", type=float, default=DT_MIN)
    p.add_argument("--dt-max", type=float, default=DT_MAX)
    p.add_argument("--dt-init", type=float, default=None)
    p.add_argument("--no-adapt", action="store_true",
                   help="disable LTE step control (fixed dt-init steps)")
    p.add_argument("--newton-rel", type=float, default=1e-5)
    p.add_argument("--poisson-abs", type=float, default=1e-26)
    p.add_argument("--continuity-abs", type=float, default=5e-18)
    p.add_argument("--newton-max-iterations", type=int, default=50)
    p.add_argument("--circuit-abs", type=float, default=1e-5)
    p.add_argument("--circuit-rel", type=float, default=1e-5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--processes", type=int, default=0)
    p.add_argument("--threads-per-process", type=int, default=1)
    p.add_argument("--signals", default=None,
                   help="comma-separated signal subset for the output CSV")
    p.add_argument("-v", "--verbose", action="store_true")


def _config_from(args, need_t_end: bool) -> RunConfig:
    overrides = {}
    for spec in args.device:
        if "=" not in spec:
            raise ValueError(f"--device expects REF=PATH, got {spec!r}")
        ref, path = spec.split("=", 1)
        overrides[ref] = path
    threads = args.threads
    processes = args.processes
    env = os.environ.get("DDCOSIM_WORKERS")
    if env:
        n = int(env)
        if n > 1:
            processes, threads = n, 1
        else:
            processes, threads = 0, 1
    cfg = RunConfig(
        netlist_path=Path(args.netlist),
        device_paths=overrides,
        t_end=getattr(args, "t_end", 0.0) or 0.0,
        dt_min=args.dt_min, dt_max=args.dt_max, dt_init=args.dt_init,
        adapt=not args.no_adapt,
        newton=NewtonTolerances(
            poisson_abs=args.poisson_abs, continuity_abs=args.continuity_abs,
            relative=args.newton_rel, max_iterations=args.newton_max_iterations),
        circuit_tol=CircuitTolerances(absolute=args.circuit_abs,
                                      relative=args.circuit_rel),
        threads=threads, processes=processes,
        threads_per_process=args.threads_per_process,
        output=Path(args.out) if getattr(args, "out", None) else None,
        signals=args.signals.split(",") if args.signals else None,
    )
    cfg.validate(need_t_end)
    return cfg


def _defaults_from(cfg: RunConfig) -> SolverDefaults:
    return SolverDefaults(newton=cfg.newton, circuit=cfg.circuit_tol,
                          lte=cfg.lte, dt_min=cfg.dt_min, dt_max=cfg.dt_max)


def _options_from(cfg: RunConfig) -> TransientOptions:
    return TransientOptions(dt_min=cfg.dt_min, dt_max=cfg.dt_max,
                            dt_init=cfg.dt_init, adapt=cfg.adapt)


def _pool_config(cfg: RunConfig) -> PoolConfig:
    return PoolConfig(threads=cfg.threads, processes=cfg.processes,
                      threads_per_process=cfg.threads_per_process)


def _write_record(record, cfg: RunConfig):
    if cfg.signals:
        keep = ["time"] + cfg.signals
        missing = [s for s in cfg.signals if s not in record.columns]
        if missing:
            raise ValueError(f"unknown signal(s): {missing}")
        idx = [record.columns.index(c) for c in keep]
        from .record import TransientRecord
        sub = TransientRecord([record.columns[i] for i in idx[1:]])
        for row in record.rows:
            sub.rows.append([row[i] for i in idx])
        record = sub
    record.write_csv(cfg.output)


def cmd_dcop(args) -> int:
    cfg = _config_from(args, need_t_end=False)
    system = load_system(cfg)
    pool = WorkerPool(system, _pool_config(cfg), tol=cfg.newton, lte=cfg.lte)
    try:
        orch = Orchestrator(system, pool, _defaults_from(cfg), _options_from(cfg))
        orch.dc_operating_point()
        names = system.signal_names()[:-2]
        values = orch.sample_row(0.0, 0)[:-2]
        width = max((len(n) for n in names), default=10)
        for n, v in zip(names, values):
            print(f"{n:<{width}}  {v: .10e}")
    finally:
        pool.shutdown()
    return 0


def cmd_tran(args) -> int:
    cfg = _config_from(args, need_t_end=True)
    system = load_system(cfg)
    pool = WorkerPool(system, _pool_config(cfg), tol=cfg.newton, lte=cfg.lte)
    try:
        orch = Orchestrator(system, pool, _defaults_from(cfg), _options_from(cfg))
        record = orch.transient(cfg.t_end)
        _write_record(record, cfg)
        print(f"wrote {len(record.rows)} rows to {cfg.output}")
    finally:
        pool.shutdown()
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from(args, need_t_end=True)
    system = load_system(cfg)
    counts = [int(w) for w in args.workers.split(",")]
    rows = benchmark(system, counts, cfg.t_end,
                     options=_options_from(cfg), defaults=_defaults_from(cfg))
    write_bench_csv(rows, cfg.output)
    for r in rows:
        print(f"workers={r.workers:<3} stage2={r.stage2_s:.3f}s "
              f"speedup={r.speedup:.2f} gs={r.gs_total}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ddcosim",
        description="Coupled drift-diffusion device / circuit co-simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dcop", help="DC operating point table")
    _add_common(p)
    p.set_defaults(fn=cmd_dcop)

    p = sub.add_parser("tran", help="transient run to CSV")
    _add_common(p)
    p.add_argument("--t-end", type=float, required=True, dest="t_end")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tran)

    p = sub.add_parser("bench", help="worker-scaling benchmark to CSV")
    _add_common(p)
    p.add_argument("--t-end", type=float, required=True, dest="t_end")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", default="1,2,4",
                   help="comma-separated worker counts")
    p.set_defaults(fn=cmd_bench)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (NetlistError, DeviceConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, NewtonError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
