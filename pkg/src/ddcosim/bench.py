"""Speedup measurements across worker-pool shapes."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .cosim import CoupledSystem, Orchestrator, TransientOptions
from .defaults import SolverDefaults
from .runtime import PoolConfig, WorkerPool


@dataclass
class BenchRow:
    label: str
    workers: int
    total_s: float
    stage1_s: float
    stage2_s: float
    steps: int
    gs_total: int
    speedup: float


def benchmark(system: CoupledSystem, worker_counts, t_end: float,
              options: TransientOptions = TransientOptions(),
              defaults: SolverDefaults = SolverDefaults(),
              use_processes: bool = True):
    """Run the same transient under each worker count; returns BenchRow list.

    Stage-2 wall time is the summed fan-out/fan-in time of the device solves;
    GS iteration counts must not depend on the worker count, so they are
    reported for verification.  Speedup is stage-2 time relative to the
    first (usually single-worker) row.
    """
    rows = []
    base = None
    for w in worker_counts:
        w = int(w)
        if w <= 1:
            cfg = PoolConfig(threads=1)
        elif use_processes:
            cfg = PoolConfig(processes=w)
        else:
            cfg = PoolConfig(threads=w)
        pool = WorkerPool(system, cfg, tol=defaults.newton, lte=defaults.lte)
        try:
            orch = Orchestrator(system, pool, defaults, options)
            t0 = time.perf_counter()
            record = orch.transient(t_end)
            total = time.perf_counter() - t0
        finally:
            pool.shutdown()
        gs_total = int(sum(s.gs_iterations for s in record.steps))
        stage2 = pool.stage2_seconds
        if base is None:
            base = stage2
        rows.append(BenchRow(label=cfg.label(), workers=w, total_s=total,
                             stage1_s=orch.stage1_seconds, stage2_s=stage2,
                             steps=len(record.steps), gs_total=gs_total,
                             speedup=base / stage2 if stage2 > 0 else 1.0))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("workers,label,total_s,stage1_s,stage2_s,steps,gs_total,speedup\n")
        for r in rows:
            fh.write(f"{r.workers},{r.label},{r.total_s:.6f},{r.stage1_s:.6f},"
                     f"{r.stage2_s:.6f},{r.steps},{r.gs_total},{r.speedup:.4f}\n")
