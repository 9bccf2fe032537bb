"""Threaded multi-rank runner with ordered in-process message channels.

Every rank runs :func:`aica.engine.run_rank` in its own thread.  Ranks only
talk through :class:`RankChannel` messages; a coordinator (the calling
thread) performs reductions, gathers step reports and aborts all ranks on
the first fault.
"""

from __future__ import annotations

import logging
import queue
import threading
import traceback
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .engine import (Molecules, ProtocolError, RankEngine, RunResult, SimConfig, StepReport,
                     _final_state, build_rank_topology, init_lattice, merge_fields, merge_reports,
                     run_rank, setup_refresh)
from .mesh import Mesh, decompose

log = logging.getLogger(__name__)

COORDINATOR = -1
DEFAULT_TIMEOUT = 120.0

# message kinds
REFER_CELL_REQUEST = "refer_cell_request"
REFERRED_MOLECULE_BATCH = "referred_molecule_batch"
MOLECULE_TRANSFER = "molecule_transfer"
ROUND_FLAG = "round_flag"
SHUTDOWN = "shutdown"


class ParallelError(RuntimeError):
    pass


class RankAborted(Exception):
    pass


@dataclass
class Message:
    kind: str
    src: int
    dst: int
    stamp: object
    payload: object = None


class RankChannel:
    """Reliable FIFO channel into one endpoint; messages are demultiplexed by sender."""

    def __init__(self, owner: int, timeout: float = DEFAULT_TIMEOUT):
        self.owner = owner
        self.inbox: queue.Queue = queue.Queue()
        self.pending: dict[int, deque] = {}
        self.timeout = timeout

    def put(self, msg: Message):
        self.inbox.put(msg)

    def _pull(self):
        try:
            msg = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"endpoint {self.owner}: no message within {self.timeout} s") from None
        if msg.kind == SHUTDOWN:
            raise RankAborted(msg.payload)
        self.pending.setdefault(msg.src, deque()).append(msg)

    def take(self, src: int, kind: str, stamp) -> Message:
        """Next message from ``src``; it must be of ``kind`` with step stamp ``stamp``."""
        q = self.pending.setdefault(src, deque())
        while not q:
            self._pull()
        msg = q.popleft()
        if msg.kind != kind or msg.stamp != stamp:
            raise ProtocolError(f"rank {self.owner}: expected {kind}@{stamp} from {src}, "
                                f"got {msg.kind}@{msg.stamp}")
        return msg


class Network:
    """All channels of one run plus an audit log of (kind, src, dst)."""

    def __init__(self, n_ranks: int, timeout: float = DEFAULT_TIMEOUT):
        self.channels = {r: RankChannel(r, timeout) for r in range(n_ranks)}
        self.coordinator = RankChannel(COORDINATOR, timeout)
        self.log: list[tuple] = []
        self._lock = threading.Lock()

    def send(self, msg: Message):
        with self._lock:
            self.log.append((msg.kind, msg.src, msg.dst))
        (self.coordinator if msg.dst == COORDINATOR else self.channels[msg.dst]).put(msg)

    def links(self, kind: str) -> set:
        return {(s, d) for k, s, d in self.log if k == kind}


class ThreadComm:
    """Rank-side view of the network, same interface as ``SerialComm``."""

    def __init__(self, rank: int, net: Network):
        self.rank = rank
        self.net = net
        self.chan = net.channels[rank]

    def exchange(self, kind, stamp, outgoing: dict, recv_from, send_to=None) -> dict:
        send_to = recv_from if send_to is None else send_to
        extra = set(k for k, v in outgoing.items() if v) - set(send_to)
        if extra:
            raise ProtocolError(f"rank {self.rank}: {kind} payload for unexpected ranks {sorted(extra)}")
        for dst in sorted(send_to):
            self.net.send(Message(kind, self.rank, dst, stamp, outgoing.get(dst) or type_empty(kind)))
        return {src: self.chan.take(src, kind, stamp).payload for src in sorted(recv_from)}

    def allreduce(self, kind, stamp, value):
        self.net.send(Message(kind, self.rank, COORDINATOR, stamp, value))
        return self.chan.take(COORDINATOR, kind, stamp).payload

    def gather(self, report: StepReport):
        self.net.send(Message("step_report", self.rank, COORDINATOR, report.step, report))

    def post(self, kind, payload):
        self.net.send(Message(kind, self.rank, COORDINATOR, None, payload))


def type_empty(kind):
    return {} if kind in (REFERRED_MOLECULE_BATCH,) else []


def _rank_main(rank, portion, molecules, config, n_steps, n_total, net):
    comm = ThreadComm(rank, net)
    try:
        topo = build_rank_topology(portion, comm, config)
        engine = RankEngine(topo, molecules, config)
        setup_refresh(engine, comm, range(portion.n_ranks))
        comm.post("topology", topo.report())
        run_rank(engine, comm, n_steps, n_total)
        comm.post("done", engine)
    except RankAborted:
        pass
    except Exception as exc:  # report every failure to the coordinator
        log.debug("rank %d failed:\n%s", rank, traceback.format_exc())
        comm.post("fault", f"{type(exc).__name__}: {exc}")


def distribute(molecules: Molecules, portions) -> list[Molecules]:
    """Split a global molecule set by owning rank; cells become local indices."""
    owner = np.full(sum(p.mesh.n_cells for p in portions), -1, np.int64)
    local = np.zeros_like(owner)
    for p in portions:
        owner[p.global_cells] = p.rank
        local[p.global_cells] = np.arange(len(p.global_cells))
    out = []
    for p in portions:
        sel = np.flatnonzero(owner[molecules.cells] == p.rank)
        m = molecules.take(sel)
        m.cells = local[m.cells]
        out.append(m)
    return out


@dataclass
class ParallelRun(RunResult):
    message_log: list = field(default_factory=list)
    neighbour_pairs: set = field(default_factory=set)


def run_parallel(mesh: Mesh, assignment, config: SimConfig, molecules: Molecules | None = None,
                 steps: int | None = None, timeout: float = DEFAULT_TIMEOUT) -> ParallelRun:
    """Decompose ``mesh`` by ``assignment`` and run one thread per rank."""
    portions = decompose(mesh, assignment)
    R = len(portions)
    if molecules is None:
        molecules = init_lattice(mesh, config.lattice, config.temperature, config.mass,
                                 config.seed, config.max_molecules)
    n_steps = config.steps if steps is None else steps
    n_total = len(molecules)
    net = Network(R, timeout)
    threads = [threading.Thread(target=_rank_main, name=f"rank{p.rank}", daemon=True,
                                args=(p.rank, p, m, config, n_steps, n_total, net))
               for p, m in zip(portions, distribute(molecules, portions))]
    for t in threads:
        t.start()

    reductions: dict[tuple, dict] = {}
    reports: dict[int, list] = {}
    rows = []
    topo_reports = {}
    engines = {}
    try:
        while len(engines) < R:
            try:
                msg = net.coordinator.inbox.get(timeout=timeout)
            except queue.Empty:
                raise ParallelError(f"no rank activity within {timeout} s") from None
            if msg.kind == "fault":
                raise ParallelError(f"rank {msg.src}: {msg.payload}")
            if msg.kind == "done":
                engines[msg.src] = msg.payload
            elif msg.kind == "topology":
                topo_reports[msg.src] = msg.payload
            elif msg.kind == "step_report":
                got = reports.setdefault(msg.stamp, [])
                got.append(msg.payload)
                if len(got) == R:
                    rows.append(merge_reports(got,
                                            config.dt))
                    del reports[msg.stamp]
            else:
                key = (msg.kind, msg.stamp)
                got = reductions.setdefault(key, {})
                if msg.src in got:
                    raise ParallelError(f"rank {msg.src} sent {msg.kind}@{msg.stamp} twice")
                got[msg.src] = msg.payload
                if len(got) == R:
                    total = sum(got[r] for r in sorted(got))
                    for r in range(R):
                        net.send(Message(msg.kind, COORDINATOR, r, msg.stamp, total))
                    del reductions[key]
    except BaseException:
        for r in range(R):
            net.channels[r].put(Message(SHUTDOWN, COORDINATOR, r, None, "aborted by coordinator"))
        for t in threads:
            t.join(timeout=5.0)
        raise
    for t in threads:
        t.join()

    ordered = [engines[r] for r in range(R)]
    mols, forces = _final_state(ordered)
    ids = np.sort(mols.ids)
    if len(ids) != n_total or (np.diff(ids) == 0).any():
        raise ParallelError("global molecule id audit failed")
    rows.sort(key=lambda r: r["step"])
    return ParallelRun(rows, mols, merge_fields(ordered), [topo_reports[r] for r in range(R)],
                       forces, list(net.log), _neighbour_pairs(portions))


def _neighbour_pairs(portions) -> set:
    return {(p.rank, n) for p in portions for n in p.neighbour_ranks}
