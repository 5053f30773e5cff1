"""Two-stage parallel runtime: partition planning, device tasks, worker pools.

Stage 1 (the circuit solve) always runs on the coordinator; Stage 2 fans the
per-device Newton solves out across in-process threads and/or long-lived
external worker processes.  Only electrode boundary data crosses a process
boundary per iteration (voltages in, Norton equivalents out); device state
lives with whichever worker owns the task.  Results merge in task-index
order, so accepted waveforms are bitwise identical for every pool shape.

The wire format (docs/worker_protocol.md): every message is a u32
little-endian byte length, one tag byte, and a payload of little-endian
f64 values.
"""

from __future__ import annotations

import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .device import (Device, NewtonError, NewtonTolerances, NortonEquivalent,
                     assemble, equilibrium_solve, newton_solve, norton_reduce)
from .mesh import DeviceMesh
from .physics import DeviceState, MobilityParams, PhysicalModels
from .timestep import STEADY, BdfContext, quadratic_predictor

TAG_SETUP_DEVICE = 1
TAG_SOLVE_REQUEST = 2
TAG_SOLVE_REPLY = 3
TAG_SHUTDOWN = 4
TAG_COMMIT_STEP = 5
TAG_REVERT_STEP = 6
TAG_SETUP_ACK = 7
TAG_FLUSH = 8
TAG_COMMIT_ACK = 9
TAG_REFRESH_STAMPS = 10
TAG_REFRESH_REPLY = 11


class WorkerFailure(Exception):
    pass


@dataclass(frozen=True)
class LteParams:
    """Weights for the normalized local-truncation-error estimate."""

    rel: float = 1e-3
    abs_v: float = 1e-6             # V, potentials and circuit unknowns
    abs_density_frac: float = 1e-6  # fraction of the device density scale


# ---------------------------------------------------------------------------
# partition planning

@dataclass(frozen=True)
class PlanTask:
    kind: str          # circuit | device | device-subdomain
    payload_id: str
    cost: int


@dataclass(frozen=True)
class PartitionPlan:
    tasks: tuple
    assignment: dict   # task index -> worker slot (device tasks only)
    n_workers: int

    def device_tasks(self):
        return [(i, t) for i, t in enumerate(self.tasks) if t.kind != "circuit"]


def plan_partition(system, n_workers: int = 1) -> PartitionPlan:
    """One task per device plus the unique Stage-1 circuit task.

    Device tasks are assigned greedily by longest processing time (cost =
    3 x vertex count) onto the requested number of worker slots.
    """
    tasks = [PlanTask("circuit", "circuit", 0)]
    for name in system.device_names():
        dev = system.devices[name]
        tasks.append(PlanTask("device", name, 3 * dev.n_vertices))

    n_workers = max(1, int(n_workers))
    loads = [0] * n_workers
    assignment = {}
    order = sorted(
        (i for i, t in enumerate(tasks) if t.kind != "circuit"),
        key=lambda i: (-tasks[i].cost, i))
    for i in order:
        slot = min(range(n_workers), key=lambda w: (loads[w], w))
        assignment[i] = slot
        loads[slot] += tasks[i].cost
    return PartitionPlan(tuple(tasks), assignment, n_workers)


# ---------------------------------------------------------------------------
# per-device task

@dataclass
class SolveReply:
    name: str
    converged: bool
    iterations: int
    norton: NortonEquivalent | None
    lte_sq: float = 0.0
    lte_count: float = 0.0


class DeviceTask:
    """Owns one device's committed state, candidate state, and histories."""

    def __init__(self, device: Device, tol: NewtonTolerances = NewtonTolerances(),
                 lte: LteParams = LteParams(), initial_state: DeviceState = None,
                 initial_history=None):
        self.device = device
        self.tol = tol
        self.lte = lte
        if initial_state is None:
            initial_state = equilibrium_solve(device)
        self.state = initial_state              # committed arrays
        self.history = list(initial_history or [])  # [(t, psi, n, p)] newest first
        self.candidate: DeviceState | None = None
        self.last_norton = self._norton_at(self.state, STEADY,
                                           {e: 0.0 for e in device.electrodes})

    def _norton_at(self, state, ctx, bias):
        probe = state.copy()
        probe.history = self.history
        sys_now = assemble(self.device, probe, bias, ctx, self.tol)
        return norton_reduce(self.device, sys_now, probe)

    def refresh(self, ctx: BdfContext) -> NortonEquivalent:
        """Relinearize the committed state under a new BDF context.

        Called at the start of each time step so the Stage-1 circuit solve
        sees displacement terms consistent with the step about to be taken
        rather than stamps inherited from the previous step's context.
        """
        bias = {}
        for e, verts in self.device.contact_vertices.items():
            v0 = verts[0]
            bias[e] = float(self.state.psi[v0] - self.device.psi_eq_contact[v0])
        self.last_norton = self._norton_at(self.state, ctx, bias)
        return self.last_norton

    def _initial_guess(self, t_new) -> DeviceState:
        if self.candidate is not None:
            # warm start from the previous Gauss-Seidel sweep of this step
            return self.candidate.copy()
        if len(self.history) >= 2:
            (t1, psi1, n1, p1), (t2, psi2, n2, p2) = self.history[0], self.history[1]
            w = (t_new - t2) / (t1 - t2)
            psi = w * psi1 + (1.0 - w) * psi2
            n = w * n1 + (1.0 - w) * n2
            p = w * p1 + (1.0 - w) * p2
            bad = (n <= 0.0) | (p <= 0.0)
            n = np.where(bad, n1, n)
            p = np.where(bad, p1, p)
            return DeviceState(psi, n, p)
        return DeviceState(self.state.psi.copy(), self.state.n.copy(),
                           self.state.p.copy())

    def solve(self, bias: dict, ctx: BdfContext, t_new: float) -> SolveReply:
        guess = self._initial_guess(t_new)
        guess.history = self.history
        try:
            final, info, sys_final = newton_solve(
                self.device, guess, bias, ctx, self.tol)
        except NewtonError as exc:
            self.candidate = None
            return SolveReply(self.device.name, False, exc.iterations, None)
        self.candidate = final
        self.last_norton = norton_reduce(self.device, sys_final, final)
        lte_sq, lte_count = self._lte(final, t_new)
        return SolveReply(self.device.name, True, info.iterations,
                          self.last_norton, lte_sq, lte_count)

    def _lte(self, cand: DeviceState, t_new: float):
        if len(self.history) < 2:
            return 0.0, 0.0
        pts = self.history[:3]
        err_sq = 0.0
        scale = self.device.density_scale
        fields = ((cand.psi, 1, self.lte.abs_v),
                  (cand.n, 2, self.lte.abs_density_frac * scale),
                  (cand.p, 3, self.lte.abs_density_frac * scale))
        for new, k, absw in fields:
            pred = quadratic_predictor(t_new, [(h[0], h[k]) for h in pts])
            w = absw + self.lte.rel * np.abs(new)
            err_sq += float(np.sum(((new - pred) / w) ** 2))
        return err_sq, float(3 * cand.n_vertices)

    def commit(self, t: float, restart: bool = False):
        if self.candidate is not None:
            self.state = self.candidate
            self.candidate = None
        self.state.history = []
        if restart:
            # waveform discontinuity: drop pre-event history so the next
            # steps rebuild the multistep order from scratch
            self.history = []
        snap = (t, self.state.psi.copy(), self.state.n.copy(), self.state.p.copy())
        if self.history and self.history[0][0] == t:
            self.history[0] = snap
        else:
            self.history.insert(0, snap)
        del self.history[3:]

    def revert(self):
        self.candidate = None


# ---------------------------------------------------------------------------
# wire protocol

def _pack(tag: int, payload) -> bytes:
    body = np.asarray(payload, dtype="<f8").tobytes()
    return struct.pack("<I", 1 + len(body)) + bytes([tag]) + body


def _read_exact(fd: int, n: int) -> bytes:
    chunks = []
    while n > 0:
        b = os.read(fd, n)
        if not b:
            raise WorkerFailure("worker channel closed")
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


def _recv(fd: int):
    (length,) = struct.unpack("<I", _read_exact(fd, 4))
    tag = _read_exact(fd, 1)[0]
    payload = np.frombuffer(_read_exact(fd, length - 1), dtype="<f8")
    return tag, payload


def _send(fd: int, tag: int, payload):
    data = _pack(tag, payload)
    view = memoryview(data)
    while view:
        written = os.write(fd, view)
        view = view[written:]


def encode_setup(slot: int, device: Device, tol: NewtonTolerances,
                 lte: LteParams) -> np.ndarray:
    m = device.models
    mesh = device.mesh
    contact_verts = [device.contact_vertices[e][0] for e in device.electrodes]
    head = [
        slot, mesh.n_vertices, mesh.area, len(contact_verts), *contact_verts,
        m.temperature, m.n_c, m.n_v, m.e_g, m.eps_r,
        m.mobility_n.mu_min, m.mobility_n.mu_max, m.mobility_n.n_ref, m.mobility_n.alpha,
        m.mobility_p.mu_min, m.mobility_p.mu_max, m.mobility_p.n_ref, m.mobility_p.alpha,
        m.v_sat_n, m.v_sat_p, m.tau_n, m.tau_p, m.auger_n, m.auger_p,
        tol.poisson_abs, tol.continuity_abs, tol.relative,
        tol.max_iterations, tol.max_polish,
        lte.rel, lte.abs_v, lte.abs_density_frac,
    ]
    return np.concatenate([np.asarray(head, dtype=np.float64),
                           mesh.vertices, device.c_vertex, device.total_doping,
                           device.tau_n, device.tau_p])


def decode_setup(payload: np.ndarray):
    slot = int(payload[0])
    nv = int(payload[1])
    area = payload[2]
    n_c = int(payload[3])
    off = 4
    contact_verts = [int(v) for v in payload[off:off + n_c]]
    off += n_c
    (temp, ncb, nvb, eg, epsr,
     mn0, mn1, mn2, mn3, mp0, mp1, mp2, mp3,
     vsn, vsp, taun, taup, augn, augp,
     pois, cont, rel, maxit, maxpol,
     lrel, labsv, labsd) = payload[off:off + 27]
    off += 27
    models = PhysicalModels(
        temperature=temp, n_c=ncb, n_v=nvb, e_g=eg, eps_r=epsr,
        mobility_n=MobilityParams(mn0, mn1, mn2, mn3),
        mobility_p=MobilityParams(mp0, mp1, mp2, mp3),
        v_sat_n=vsn, v_sat_p=vsp, tau_n=taun, tau_p=taup,
        auger_n=augn, auger_p=augp)
    tol = NewtonTolerances(poisson_abs=pois, continuity_abs=cont, relative=rel,
                           max_iterations=int(maxit), max_polish=int(maxpol))
    lte = LteParams(rel=lrel, abs_v=labsv, abs_density_frac=labsd)
    vertices = np.array(payload[off:off + nv]); off += nv
    c_vertex = np.array(payload[off:off + nv]); off += nv
    total = np.array(payload[off:off + nv]); off += nv
    tau_n = np.array(payload[off:off + nv]); off += nv
    tau_p = np.array(payload[off:off + nv]); off += nv
    contacts = {f"e{i}": (v,) for i, v in enumerate(contact_verts)}
    mesh = DeviceMesh(vertices, area, contacts)
    dev = Device.from_tables(f"slot{slot}", mesh, models, c_vertex, total,
                             tau_n, tau_p)
    return slot, DeviceTask(dev, tol, lte)


def encode_solve_request(slot, ctx: BdfContext, t_new, volts):
    return np.concatenate([
        np.asarray([slot, ctx.order, ctx.dt, ctx.alpha0, ctx.alpha1,
                    ctx.alpha2, t_new, len(volts)], dtype=np.float64),
        np.asarray(volts, dtype=np.float64)])


def decode_solve_request(payload):
    slot = int(payload[0])
    ctx = BdfContext(order=int(payload[1]), dt=payload[2], alpha0=payload[3],
                     alpha1=payload[4], alpha2=payload[5])
    t_new = payload[6]
    ne = int(payload[7])
    volts = np.array(payload[8:8 + ne])
    return slot, ctx, t_new, volts


def encode_solve_reply(slot, reply: SolveReply, n_e: int):
    if reply.converged:
        norton = reply.norton.as_payload()
    else:
        norton = np.zeros(n_e * n_e + 2 * n_e)
    head = np.asarray([slot, 1.0 if reply.converged else 0.0,
                       reply.iterations, n_e, reply.lte_sq, reply.lte_count],
                      dtype=np.float64)
    return np.concatenate([head, norton])


def decode_solve_reply(payload, electrodes):
    slot = int(payload[0])
    converged = payload[1] != 0.0
    iterations = int(payload[2])
    lte_sq, lte_count = payload[4], payload[5]
    norton = None
    if converged:
        norton = NortonEquivalent.from_payload(electrodes, payload[6:])
    return slot, SolveReply("", converged, iterations, norton, lte_sq, lte_count)


# ---------------------------------------------------------------------------
# workers

class LocalWorker:
    """Hosts device tasks in the coordinator process (optionally threaded)."""

    def __init__(self, threads: int = 1):
        self.tasks: dict[int, DeviceTask] = {}
        self.threads = max(1, threads)
        self._executor = (ThreadPoolExecutor(max_workers=self.threads)
                          if self.threads > 1 else None)

    def setup(self, slot: int, task: DeviceTask):
        self.tasks[slot] = task

    def solve_batch(self, requests):
        """requests: list of (slot, bias_dict, ctx, t_new); returns slot->reply."""
        def run(req):
            slot, bias, ctx, t_new = req
            return slot, self.tasks[slot].solve(bias, ctx, t_new)
        if self._executor is not None and len(requests) > 1:
            results = list(self._executor.map(run, requests))
        else:
            results = [run(r) for r in requests]
        return dict(results)

    def commit(self, t: float, restart: bool):
        for slot in sorted(self.tasks):
            self.tasks[slot].commit(t, restart)

    def revert(self):
        for slot in sorted(self.tasks):
            self.tasks[slot].revert()

    def shutdown(self):
        if self._executor is not None:
            self._executor.shutdown()


def _worker_main(rx: int, tx: int, threads: int):
    """Long-lived external worker: message loop over the byte-stream channel."""
    worker = LocalWorker(threads=threads)
    pending = []
    try:
        while True:
            tag, payload = _recv(rx)
            if tag == TAG_SHUTDOWN:
                break
            elif tag == TAG_SETUP_DEVICE:
                slot, task = decode_setup(payload)
                worker.setup(slot, task)
                nz = task.last_norton
                _send(tx, TAG_SETUP_ACK,
                      np.concatenate([[slot, len(task.device.electrodes)],
                                      nz.as_payload()]))
            elif tag == TAG_SOLVE_REQUEST:
                slot, ctx, t_new, volts = decode_solve_request(payload)
                task = worker.tasks[slot]
                bias = {e: volts[i] for i, e in enumerate(task.device.electrodes)}
                pending.append((slot, bias, ctx, t_new))
            elif tag == TAG_FLUSH:
                replies = worker.solve_batch(pending)
                for slot, _, _, _ in pending:
                    r = replies[slot]
                    ne = len(worker.tasks[slot].device.electrodes)
                    _send(tx, TAG_SOLVE_REPLY, encode_solve_reply(slot, r, ne))
                pending = []
            elif tag == TAG_COMMIT_STEP:
                t, restart = payload[0], payload[1] != 0.0
                worker.commit(t, restart)
                for slot in sorted(worker.tasks):
                    st = worker.tasks[slot].state
                    _send(tx, TAG_COMMIT_ACK,
                          np.concatenate([[slot, st.n_vertices],
                                          st.psi, st.n, st.p]))
            elif tag == TAG_REFRESH_STAMPS:
                ctx = BdfContext(order=int(payload[0]), dt=payload[1],
                                 alpha0=payload[2], alpha1=payload[3],
                                 alpha2=payload[4])
                for slot in sorted(worker.tasks):
                    nz = worker.tasks[slot].refresh(ctx)
                    _send(tx, TAG_REFRESH_REPLY,
                          np.concatenate([[slot, len(nz.electrodes)],
                                          nz.as_payload()]))
            elif tag == TAG_REVERT_STEP:
                worker.revert()
    except WorkerFailure:
        pass
    finally:
        worker.shutdown()
        try:
            os.close(rx)
            os.close(tx)
        except OSError:
            pass


class ProcessWorker:
    """Coordinator-side handle to one external worker process."""

    def __init__(self, threads: int = 1):
        import multiprocessing as mp
        c2w_r, c2w_w = os.pipe()
        w2c_r, w2c_w = os.pipe()
        ctx = mp.get_context("fork")
        self.process = ctx.Process(target=_worker_main,
                                   args=(c2w_r, w2c_w, threads), daemon=True)
        self.process.start()
        os.close(c2w_r)
        os.close(w2c_w)
        self.tx = c2w_w
        self.rx = w2c_r
        self.alive = True

    def send(self, tag, payload):
        if not self.alive:
            raise WorkerFailure("worker already failed")
        try:
            _send(self.tx, tag, payload)
        except (OSError, BrokenPipeError) as exc:
            self.alive = False
            raise WorkerFailure(str(exc)) from exc

    def recv(self):
        if not self.alive:
            raise WorkerFailure("worker already failed")
        try:
            return _recv(self.rx)
        except WorkerFailure:
            self.alive = False
            raise

    def kill(self):
        """Test hook: hard-kill the worker process."""
        self.process.terminate()
        self.process.join()

    def shutdown(self):
        if self.alive:
            try:
                _send(self.tx, TAG_SHUTDOWN, [])
            except OSError:
                pass
        try:
            os.close(self.tx)
            os.close(self.rx)
        except OSError:
            pass
        self.process.join(timeout=5.0)
        if self.process.is_alive():
            self.process.terminate()


# ---------------------------------------------------------------------------
# the pool

@dataclass
class PoolConfig:
    threads: int = 1            # in-process worker threads (when processes == 0)
    processes: int = 0          # external worker processes
    threads_per_process: int = 1

    @property
    def n_slots(self) -> int:
        if self.processes > 0:
            return self.processes * self.threads_per_process
        return max(1, self.threads)

    def label(self) -> str:
        if self.processes > 0:
            return f"{self.processes}px{self.threads_per_process}t"
        return f"{self.threads}t"


class WorkerPool:
    """Fans Stage-2 device solves out to local threads or worker processes.

    Task placement follows the partition plan; replies always merge in
    task-index order.  A failed external worker is retried once by rebuilding
    its tasks on the coordinator from the committed-state mirror, after which
    those tasks stay local.
    """

    def __init__(self, system, config: PoolConfig = PoolConfig(),
                 tol: NewtonTolerances = NewtonTolerances(),
                 lte: LteParams = LteParams()):
        self.system = system
        self.config = config
        self.tol = tol
        self.lte = lte
        self.plan = plan_partition(system, config.n_slots)
        self.stage2_seconds = 0.0
        self.solve_calls = 0
        self.message_doubles_per_solve: dict[str, int] = {}

        names = [t.payload_id for _, t in self.plan.device_tasks()]
        self.names = names
        self.slot_of = {name: i for i, name in enumerate(names)}
        self.electrodes = {n: system.devices[n].electrodes for n in names}

        self.local = LocalWorker(threads=config.threads if config.processes == 0 else 1)
        self.procs: list[ProcessWorker] = []
        self.place: dict[str, int | None] = {}
        # mirror: name -> [(t, psi, n, p)] newest first, for worker-failure retry
        self.mirror: dict[str, list] = {n: [] for n in names}
        self.initial_stamp: dict[str, NortonEquivalent] = {}

        if config.processes > 0:
            self.procs = [ProcessWorker(threads=config.threads_per_process)
                          for _ in range(config.processes)]
        for idx, t in self.plan.device_tasks():
            name = t.payload_id
            wslot = self.plan.assignment[idx]
            self.place[name] = (wslot % config.processes
                                if config.processes > 0 else None)

        for name in self.names:
            dev = system.devices[name]
            slot = self.slot_of[name]
            where = self.place[name]
            if where is None:
                task = DeviceTask(dev, tol, lte)
                self.local.setup(slot, task)
                self.initial_stamp[name] = task.last_norton
                st = task.state
                self.mirror[name] = [(0.0, st.psi.copy(), st.n.copy(), st.p.copy())]
            else:
                self.procs[where].send(
                    TAG_SETUP_DEVICE, encode_setup(slot, dev, tol, lte))
        for name in self.names:
            where = self.place[name]
            if where is None:
                continue
            tag, payload = self.procs[where].recv()
            assert tag == TAG_SETUP_ACK
            slot = int(payload[0])
            nm = self.names[slot]
            self.initial_stamp[nm] = NortonEquivalent.from_payload(
                self.electrodes[nm], payload[2:])

    # -- stage 2 ----------------------------------------------------------

    def solve_all(self, volts: dict, ctx: BdfContext, t_new: float) -> dict:
        """volts: name -> {electrode: V}.  Returns name -> SolveReply."""
        t0 = time.perf_counter()
        local_reqs = []
        sent: dict[int, list] = {}

        for name in self.names:
            slot = self.slot_of[name]
            bias = volts[name]
            where = self.place[name]
            if where is None:
                local_reqs.append((slot, bias, ctx, t_new))
                continue
            v = [bias[e] for e in self.electrodes[name]]
            payload = encode_solve_request(slot, ctx, t_new, v)
            try:
                self.procs[where].send(TAG_SOLVE_REQUEST, payload)
                sent.setdefault(where, []).append(name)
                self.message_doubles_per_solve[name] = payload.size
            except WorkerFailure:
                self._retry_local(name)
                local_reqs.append((slot, bias, ctx, t_new))

        for w in sorted(sent):
            try:
                self.procs[w].send(TAG_FLUSH, [])
            except WorkerFailure:
                for name in sent[w]:
                    self._retry_local(name)
                    local_reqs.append((self.slot_of[name], volts[name], ctx, t_new))
                sent[w] = []

        replies: dict[str, SolveReply] = {}
        for slot, reply in self.local.solve_batch(local_reqs).items():
            reply.name = self.names[slot]
            replies[reply.name] = reply

        for w in sorted(sent):
            ok = True
            for _ in sent[w]:
                if not ok:
                    break
                try:
                    tag, payload = self.procs[w].recv()
                    assert tag == TAG_SOLVE_REPLY
                    slot = int(payload[0])
                    name = self.names[slot]
                    _, reply = decode_solve_reply(payload, self.electrodes[name])
                    reply.name = name
                    replies[name] = reply
                    self.message_doubles_per_solve[name] += payload.size
                except WorkerFailure:
                    ok = False
            if not ok:
                for name in sent[w]:
                    if name not in replies:
                        self._retry_local(name)
                        slot = self.slot_of[name]
                        r = self.local.solve_batch(
                            [(slot, volts[name], ctx, t_new)])
                        r[slot].name = name
                        replies[name] = r[slot]

        self.stage2_seconds += time.perf_counter() - t0
        self.solve_calls += 1
        return {name: replies[name] for name in self.names}

    def _retry_local(self, name: str):
        """Rebuild a failed worker's task on the coordinator from the mirror."""
        slot = self.slot_of[name]
        if slot in self.local.tasks:
            return
        hist = self.mirror.get(name)
        if not hist:
            raise WorkerFailure(
                f"worker for device {name!r} failed before any committed "
                "state reached the coordinator")
        newest = hist[0]
        state = DeviceState(newest[1].copy(), newest[2].copy(), newest[3].copy())
        task = DeviceTask(self.system.devices[name], self.tol, self.lte,
                          initial_state=state,
                          initial_history=[(t, a.copy(), b.copy(), c.copy())
                                           for t, a, b, c in hist])
        self.local.setup(slot, task)
        self.place[name] = None

    # -- step lifecycle ----------------------------------------------------

    def _push_mirror(self, name, t, psi, n, p, restart):
        hist = self.mirror[name]
        if restart:
            hist.clear()
        if hist and hist[0][0] == t:
            hist[0] = (t, psi, n, p)
        else:
            hist.insert(0, (t, psi, n, p))
        del hist[3:]

    def commit(self, t: float, restart: bool = False):
        self.local.commit(t, restart)
        for slot in sorted(self.local.tasks):
            name = self.names[slot]
            st = self.local.tasks[slot].state
            self._push_mirror(name, t, st.psi.copy(), st.n.copy(), st.p.copy(),
                              restart)
        flag = 1.0 if restart else 0.0
        active = []
        for w, proc in enumerate(self.procs):
            hosted = [n for n in self.names if self.place[n] == w]
            if not hosted or not proc.alive:
                continue
            try:
                proc.send(TAG_COMMIT_STEP, [t, flag])
                active.append((w, hosted))
            except WorkerFailure:
                pass
        for w, hosted in active:
            proc = self.procs[w]
            for _ in hosted:
                try:
                    tag, payload = proc.recv()
                    assert tag == TAG_COMMIT_ACK
                    slot = int(payload[0])
                    nv = int(payload[1])
                    psi = np.array(payload[2:2 + nv])
                    n = np.array(payload[2 + nv:2 + 2 * nv])
                    p = np.array(payload[2 + 2 * nv:2 + 3 * nv])
                    self._push_mirror(self.names[slot], t, psi, n, p, restart)
                except WorkerFailure:
                    break

    def revert(self):
        self.local.revert()
        for w, proc in enumerate(self.procs):
            if proc.alive and any(self.place[n] == w for n in self.names):
                try:
                    proc.send(TAG_REVERT_STEP, [])
                except WorkerFailure:
                    pass

    def refresh_stamps(self, ctx: BdfContext) -> dict:
        """Relinearize every committed device under the new BDF context."""
        stamps = {}
        payload = np.asarray([ctx.order, ctx.dt, ctx.alpha0, ctx.alpha1,
                              ctx.alpha2], dtype=np.float64)
        sent = []
        for w, proc in enumerate(self.procs):
            hosted = [n for n in self.names if self.place[n] == w]
            if not hosted or not proc.alive:
                continue
            try:
                proc.send(TAG_REFRESH_STAMPS, payload)
                sent.append((w, hosted))
            except WorkerFailure:
                for name in hosted:
                    self._retry_local(name)
        for slot in sorted(self.local.tasks):
            stamps[self.names[slot]] = self.local.tasks[slot].refresh(ctx)
        for w, hosted in sent:
            proc = self.procs[w]
            for _ in hosted:
                try:
                    tag, data = proc.recv()
                    assert tag == TAG_REFRESH_REPLY
                    slot = int(data[0])
                    name = self.names[slot]
                    stamps[name] = NortonEquivalent.from_payload(
                        self.electrodes[name], data[2:])
                except WorkerFailure:
                    break
            else:
                continue
            for name in hosted:
                if name not in stamps:
                    self._retry_local(name)
                    stamps[name] = self.local.tasks[self.slot_of[name]].refresh(ctx)
        return {name: stamps[name] for name in self.names}

    def initial_stamps(self) -> dict:
        return dict(self.initial_stamp)

    def shutdown(self):
        self.local.shutdown()
        for proc in self.procs:
            proc.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
