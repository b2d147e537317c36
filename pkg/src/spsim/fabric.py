"""Deterministic simulated multi-rank runtime.

Logical ranks run ordinary Python callables ("rank programs") on worker
threads, but exactly one rank executes at a time and control passes
round-robin at communication calls, so observable behavior is identical to
a single-threaded schedule.  Collectives resolve when every participant of
the group has arrived with a matching call; a mismatch or a rank finishing
while peers wait is reported as a structured deadlock error instead of a
hang.  Every off-rank message is logged with its exact byte count and link
class, and the log is byte-identical across reruns of the same program.
"""

from __future__ import annotations

import json
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Topology",
    "DeviceMesh",
    "CommRecord",
    "CommLog",
    "RankHandle",
    "FaultInjection",
    "FabricError",
    "DeadlockError",
    "CollectiveMismatchError",
    "MeshPlacementWarning",
    "build_mesh",
    "run_program",
    "comm_time",
    "payload_nbytes",
    "load_topology",
]

LINK_INTRA = "intra"
LINK_INTER = "inter"

# Default link speeds: 900 GB/s over the fast intra-node fabric, 50 GB/s over
# the single-path inter-node fabric (an 18x gap).  Latencies are placeholders
# and config-exposed, not calibrated values.
DEFAULT_INTRA_BW = 900e9
DEFAULT_INTER_BW = 50e9
DEFAULT_INTRA_LATENCY = 2e-6
DEFAULT_INTER_LATENCY = 10e-6


class FabricError(RuntimeError):
    pass


class DeadlockError(FabricError):
    pass


class CollectiveMismatchError(DeadlockError):
    pass


class MeshPlacementWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Topology:
    """Two-tier cluster: nodes of GPUs with fast intra / slow inter links."""

    num_nodes: int = 1
    gpus_per_node: int = 1
    intra_node_bandwidth: float = DEFAULT_INTRA_BW  # bytes/s
    inter_node_bandwidth: float = DEFAULT_INTER_BW  # bytes/s
    intra_node_latency: float = DEFAULT_INTRA_LATENCY  # seconds/message
    inter_node_latency: float = DEFAULT_INTER_LATENCY  # seconds/message

    def __post_init__(self) -> None:
        if self.num_nodes < 1 or self.gpus_per_node < 1:
            raise ValueError("node and GPU counts must be >= 1")
        if self.intra_node_bandwidth <= 0 or self.inter_node_bandwidth <= 0:
            raise ValueError("bandwidths must be > 0")
        if self.intra_node_latency < 0 or self.inter_node_latency < 0:
            raise ValueError("latencies must be >= 0")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.gpus_per_node

    def link_class(self, src: int, dst: int) -> str:
        return LINK_INTRA if self.node_of(src) == self.node_of(dst) else LINK_INTER

    def bandwidth(self, link: str) -> float:
        return self.intra_node_bandwidth if link == LINK_INTRA else self.inter_node_bandwidth

    def latency(self, link: str) -> float:
        return self.intra_node_latency if link == LINK_INTRA else self.inter_node_latency


_TOPOLOGY_KEYS = {
    "nodes",
    "gpus_per_node",
    "intra_bw_gbps",
    "inter_bw_gbps",
    "latency_us_intra",
    "latency_us_inter",
}


def topology_from_dict(cfg: dict) -> Topology:
    unknown = set(cfg) - _TOPOLOGY_KEYS
    if unknown:
        raise ValueError(f"unknown topology key(s): {sorted(unknown)}")
    return Topology(
        num_nodes=int(cfg.get("nodes", 1)),
        gpus_per_node=int(cfg.get("gpus_per_node", 1)),
        intra_node_bandwidth=float(cfg.get("intra_bw_gbps", DEFAULT_INTRA_BW / 1e9)) * 1e9,
        inter_node_bandwidth=float(cfg.get("inter_bw_gbps", DEFAULT_INTER_BW / 1e9)) * 1e9,
        intra_node_latency=float(cfg.get("latency_us_intra", DEFAULT_INTRA_LATENCY * 1e6)) * 1e-6,
        inter_node_latency=float(cfg.get("latency_us_inter", DEFAULT_INTER_LATENCY * 1e6)) * 1e-6,
    )


def load_topology(path) -> Topology:
    """Load a Topology from a JSON config file (strict keys)."""
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: topology config must be an object")
    return topology_from_dict(cfg)


def comm_time(nbytes: float, link: str, topology: Topology) -> float:
    """Linear cost model: per-message latency plus bytes/bandwidth."""
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    return topology.latency(link) + nbytes / topology.bandwidth(link)


@dataclass(frozen=True)
class CommRecord:
    step: int
    kind: str  # p2p | a2a | all_gather | broadcast
    src: int
    dst: int
    nbytes: int
    link: str


class CommLog:
    """Ordered record of every off-rank message of a program run."""

    def __init__(self) -> None:
        self.records: list[CommRecord] = []
        self.tampered: list[tuple[int, int, int, int]] = []  # (src, dst, step, index)

    def append(self, record: CommRecord) -> None:
        self.records.append(record)

    def total_bytes(self, kind: str | None = None, link: str | None = None) -> int:
        return sum(
            r.nbytes
            for r in self.records
            if (kind is None or r.kind == kind) and (link is None or r.link == link)
        )

    def count(self, kind: str | None = None, link: str | None = None) -> int:
        return sum(
            1
            for r in self.records
            if (kind is None or r.kind == kind) and (link is None or r.link == link)
        )

    def kinds(self) -> set[str]:
        return {r.kind for r in self.records}

    def to_rows(self) -> list[tuple]:
        return [(r.step, r.kind, r.src, r.dst, r.nbytes, r.link) for r in self.records]

    def extend(self, other: "CommLog") -> None:
        self.records.extend(other.records)
        self.tampered.extend(other.tampered)

    def __len__(self) -> int:
        return len(self.records)


def payload_nbytes(payload) -> int:
    """Exact wire size of a message payload.

    Arrays count their buffer size, scalars count 8 bytes, containers sum
    their elements; anything else is a programming error.
    """
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return payload.nbytes
    if isinstance(payload, (bool, int, float, np.generic)):
        return 8
    if isinstance(payload, (tuple, list)):
        return sum(payload_nbytes(p) for p in payload)
    raise TypeError(f"cannot size payload of type {type(payload)!r}")


@dataclass(frozen=True)
class DeviceMesh:
    """World of ranks arranged as (all-to-all groups x ring groups).

    Within each sequence-parallel block of ``a2a_degree * p2p_degree`` ranks,
    all-to-all groups are contiguous rank spans (packed intra-node first) and
    ring groups connect corresponding members across the spans.
    """

    topology: Topology
    a2a_degree: int = 1
    p2p_degree: int = 1

    @property
    def sp_degree(self) -> int:
        return self.a2a_degree * self.p2p_degree

    @property
    def world_size(self) -> int:
        return self.topology.world_size

    def _sp_base(self, rank: int) -> int:
        return rank - rank % self.sp_degree

    def sp_group_of(self, rank: int) -> tuple[int, ...]:
        base = self._sp_base(rank)
        return tuple(range(base, base + self.sp_degree))

    def a2a_index(self, rank: int) -> int:
        return (rank % self.sp_degree) % self.a2a_degree

    def p2p_index(self, rank: int) -> int:
        return (rank % self.sp_degree) // self.a2a_degree

    def a2a_group_of(self, rank: int) -> tuple[int, ...]:
        base = self._sp_base(rank) + self.p2p_index(rank) * self.a2a_degree
        return tuple(range(base, base + self.a2a_degree))

    def p2p_group_of(self, rank: int) -> tuple[int, ...]:
        base = self._sp_base(rank) + self.a2a_index(rank)
        return tuple(base + i * self.a2a_degree for i in range(self.p2p_degree))


def build_mesh(topology: Topology, a2a_degree: int = 1, p2p_degree: int = 1) -> DeviceMesh:
    """Build the communication mesh, packing all-to-all groups intra-node.

    Raises if the sequence-parallel degree does not divide the world size.
    Emits a MeshPlacementWarning when any all-to-all group spans nodes
    (legal, but its messages will cross slow links).
    """
    if a2a_degree < 1 or p2p_degree < 1:
        raise ValueError("mesh degrees must be >= 1")
    sp = a2a_degree * p2p_degree
    world = topology.world_size
    if sp > world or world % sp != 0:
        raise ValueError(
            f"sequence-parallel degree {sp} (= {a2a_degree} x {p2p_degree}) "
            f"does not divide world size {world}"
        )
    mesh = DeviceMesh(topology=topology, a2a_degree=a2a_degree, p2p_degree=p2p_degree)
    for base in range(0, world, sp):
        for rank in range(base, base + sp, a2a_degree):
            group = mesh.a2a_group_of(rank)
            if len({topology.node_of(r) for r in group}) > 1:
                warnings.warn(
                    f"all-to-all group {group} spans nodes "
                    f"(a2a_degree={a2a_degree}, gpus_per_node={topology.gpus_per_node}); "
                    "its traffic will use inter-node links",
                    MeshPlacementWarning,
                    stacklevel=2,
                )
                break
        else:
            continue
        break
    return mesh


@dataclass(frozen=True)
class FaultInjection:
    """Test hook: corrupt the payload of the n-th logged message."""

    message_index: int


class _Cancelled(BaseException):
    pass


@dataclass
class _Pending:
    kind: str
    group: tuple[int, ...]
    payload: object
    meta: dict = field(default_factory=dict)
    step: int = 0


class RankHandle:
    """Communication handle passed to a rank program."""

    __slots__ = ("_rt", "rank", "mesh")

    def __init__(self, runtime: "_Runtime", rank: int) -> None:
        self._rt = runtime
        self.rank = rank
        self.mesh = runtime.mesh

    def send_recv(self, group, dst: int, src: int, payload):
        """Rotate payloads within ``group``: send to dst, receive from src.

        The (rank -> dst) edges of the group must form a permutation.
        """
        return self._rt.block_on(
            self.rank, _Pending("p2p", tuple(group), payload, {"dst": dst, "src": src})
        )

    def all_to_all(self, group, shards):
        """Exchange ``len(group)`` shards; receive shard i-from-rank-j as j-th."""
        group = tuple(group)
        if len(shards) != len(group):
            raise FabricError(
                f"rank {self.rank}: all_to_all expects {len(group)} shards, "
                f"got {len(shards)}"
            )
        return self._rt.block_on(self.rank, _Pending("a2a", group, list(shards)))

    def all_gather(self, group, value):
        """Collect every member's value, returned in group order."""
        return self._rt.block_on(self.rank, _Pending("all_gather", tuple(group), value))

    def broadcast(self, group, root: int, value=None):
        """Distribute the root's value to every group member."""
        return self._rt.block_on(
            self.rank, _Pending("broadcast", tuple(group), value, {"root": root})
        )


def _tamper(payload):
    """Flip the first array (or bump the first scalar) in a payload."""
    if isinstance(payload, np.ndarray):
        return -payload
    if isinstance(payload, (bool, np.bool_)):
        return not payload
    if isinstance(payload, (int, float, np.generic)):
        return payload + 1
    if isinstance(payload, (tuple, list)):
        items = list(payload)
        for i, item in enumerate(items):
            flipped = _tamper(item)
            if flipped is not item:
                items[i] = flipped
                break
        return type(payload)(items) if isinstance(payload, tuple) else items
    return payload


_READY, _BLOCKED, _DONE, _FAILED = "ready", "blocked", "done", "failed"


class _Runtime:
    def __init__(self, mesh: DeviceMesh, fault: FaultInjection | None) -> None:
        self.mesh = mesh
        self.fault = fault
        self.log = CommLog()
        n = mesh.world_size
        self.n = n
        self.state = [_READY] * n
        self.pending: list[_Pending | None] = [None] * n
        self.steps = [0] * n
        self.outputs: list[object] = [None] * n
        self.errors: list[BaseException | None] = [None] * n
        self.results: dict[int, object] = {}
        self.resume = [threading.Event() for _ in range(n)]
        self.parked = [threading.Event() for _ in range(n)]
        self.cancelled = False
        self.msg_counter = 0

    # -- rank-thread side -------------------------------------------------

    def entry(self, rank: int, program) -> None:
        self.resume[rank].wait()
        self.resume[rank].clear()
        if self.cancelled:
            self.state[rank] = _FAILED
            self.parked[rank].set()
            return
        try:
            self.outputs[rank] = program(RankHandle(self, rank))
            self.state[rank] = _DONE
        except _Cancelled:
            self.state[rank] = _FAILED
        except BaseException as exc:  # propagated by the driver
            self.errors[rank] = exc
            self.state[rank] = _FAILED
        finally:
            self.parked[rank].set()

    def block_on(self, rank: int, op: _Pending):
        op.step = self.steps[rank]
        self.steps[rank] += 1
        self.pending[rank] = op
        self.state[rank] = _BLOCKED
        self.parked[rank].set()
        self.resume[rank].wait()
        self.resume[rank].clear()
        if self.cancelled:
            raise _Cancelled()
        self.pending[rank] = None
        return self.results.pop(rank)

    # -- driver side ------------------------------------------------------

    def run(self, program):
        threads = [
            threading.Thread(target=self.entry, args=(r, program), daemon=True)
            for r in range(self.n)
        ]
        for t in threads:
            t.start()
        try:
            self._drive()
        except BaseException:
            self._cancel_all()
            raise
        finally:
            for t in threads:
                t.join(timeout=5.0)
        return self.outputs, self.log

    def _drive(self) -> None:
        while True:
            progressed = False
            for rank in range(self.n):
                if self.state[rank] != _READY:
                    continue
                progressed = True
                self._step_rank(rank)
                if self.state[rank] == _FAILED:
                    raise self.errors[rank]
                if self.state[rank] == _BLOCKED:
                    self._try_resolve(self.pending[rank].group)
            if all(s == _DONE for s in self.state):
                return
            if not progressed:
                self._raise_deadlock()

    def _step_rank(self, rank: int) -> None:
        self.resume[rank].set()
        self.parked[rank].wait()
        self.parked[rank].clear()

    def _cancel_all(self) -> None:
        self.cancelled = True
        for rank in range(self.n):
            if self.state[rank] in (_DONE, _FAILED):
                continue
            self.results.setdefault(rank, None)
            self.resume[rank].set()

    def _raise_deadlock(self) -> None:
        # Re-check every blocked group: a peer that finished or switched
        # groups after this rank blocked surfaces as a mismatch here.
        for rank in range(self.n):
            if self.state[rank] == _BLOCKED:
                self._try_resolve(self.pending[rank].group)
        if any(s == _READY for s in self.state):
            return  # a collective resolved after all; keep driving
        waiting = "; ".join(
            f"rank {r} waiting on {self.pending[r].kind} over group "
            f"{self.pending[r].group} at step {self.pending[r].step}"
            for r in range(self.n)
            if self.state[r] == _BLOCKED
        )
        raise DeadlockError(f"no runnable rank and no resolvable collective: {waiting}")

    def _try_resolve(self, group: tuple[int, ...]) -> None:
        ops: list[_Pending] = []
        for member in group:
            st = self.state[member]
            if st == _DONE:
                raise CollectiveMismatchError(
                    f"rank {member} finished while ranks {sorted(set(group) - {member})} "
                    f"wait on a collective over group {group}"
                )
            if st != _BLOCKED:
                return  # not everyone has arrived yet
            op = self.pending[member]
            if op.group != group:
                raise CollectiveMismatchError(
                    f"group mismatch at step {op.step}: rank {member} joined "
                    f"{op.group} while peers use {group}"
                )
            ops.append(op)
        kinds = {op.kind for op in ops}
        if len(kinds) > 1:
            detail = ", ".join(
                f"rank {m} issued {op.kind} at step {op.step}" for m, op in zip(group, ops)
            )
            raise CollectiveMismatchError(f"collective mismatch: {detail}")
        resolver = getattr(self, f"_resolve_{ops[0].kind}")
        resolver(group, ops)
        for member in group:
            self.state[member] = _READY

    def _deliver(self, step: int, kind: str, src: int, dst: int, payload):
        """Log one directed message and return the (possibly tampered) payload."""
        if src == dst:
            return payload
        link = self.mesh.topology.link_class(src, dst)
        self.log.append(CommRecord(step, kind, src, dst, payload_nbytes(payload), link))
        index = self.msg_counter
        self.msg_counter += 1
        if self.fault is not None and index == self.fault.message_index:
            payload = _tamper(payload)
            self.log.tampered.append((src, dst, step, index))
        return payload

    def _resolve_p2p(self, group, ops) -> None:
        dst_of = {m: op.meta["dst"] for m, op in zip(group, ops)}
        src_of = {m: op.meta["src"] for m, op in zip(group, ops)}
        if sorted(dst_of.values()) != sorted(group):
            raise CollectiveMismatchError(
                f"p2p destinations {dst_of} are not a permutation of group {group}"
            )
        for sender, dst in dst_of.items():
            if src_of[dst] != sender:
                raise CollectiveMismatchError(
                    f"rank {dst} expects to receive from {src_of[dst]} "
                    f"but rank {sender} is sending to it"
                )
        payload_of = {m: op.payload for m, op in zip(group, ops)}
        for sender in group:  # deterministic log order: sender-major
            dst = dst_of[sender]
            op = self.pending[sender]
            self.results[dst] = self._deliver(op.step, "p2p", sender, dst, payload_of[sender])

    def _resolve_a2a(self, group, ops) -> None:
        for m, op in zip(group, ops):
            if len(op.payload) != len(group):
                raise FabricError(
                    f"rank {m}: all_to_all shard count {len(op.payload)} "
                    f"!= group size {len(group)}"
                )
        received = {m: [None] * len(group) for m in group}
        for i, sender in enumerate(group):
            for j, dst in enumerate(group):
                shard = ops[i].payload[j]
                received[dst][i] = self._deliver(ops[i].step, "a2a", sender, dst, shard)
        for m in group:
            self.results[m] = received[m]

    def _resolve_all_gather(self, group, ops) -> None:
        received = {m: [None] * len(group) for m in group}
        for i, sender in enumerate(group):
            for dst in group:
                received[dst][i] = self._deliver(
                    ops[i].step, "all_gather", sender, dst, ops[i].payload
                )
        for m in group:
            self.results[m] = received[m]

    def _resolve_broadcast(self, group, ops) -> None:
        roots = {op.meta["root"] for op in ops}
        if len(roots) != 1:
            raise CollectiveMismatchError(f"broadcast roots disagree: {sorted(roots)}")
        root = roots.pop()
        if root not in group:
            raise FabricError(f"broadcast root {root} not in group {group}")
        value = ops[group.index(root)].payload
        step = ops[group.index(root)].step
        for m in group:
            self.results[m] = self._deliver(step, "broadcast", root, m, value)


def run_program(mesh: DeviceMesh, program, fault: FaultInjection | None = None):
    """Run one SPMD program on every rank of the mesh.

    ``program(handle)`` is called once per rank; communication happens through
    the handle.  Returns (per-rank outputs in rank order, CommLog).
    """
    return _Runtime(mesh, fault).run(program)
