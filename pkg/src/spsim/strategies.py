"""Sequence-parallel attention strategies executed over the simulated fabric.

Four schemes compute the same causal grouped-query attention:

* naive ring:  contiguous chunks, KV rotated P-1 hops (causally imbalanced)
* zigzag ring: two-end chunks, same rotation, balanced causal load
* ulysses:     all-to-all trades sequence sharding for head sharding
* 2D hybrid:   all-to-all head sharding inside each group, KV ring across
               groups; the effective degree is the product

All strategies share one blockwise engine, so the degenerate 2D factors
(a2a=1 or p2p=1) reproduce the pure strategies bitwise.  Every off-rank
byte lands in the CommLog, which the analytic cost model must match
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fabric import DeviceMesh, run_program
from .numeric import (
    AttentionSpec,
    blockwise_attention_step,
    finalize_attention,
    init_attention_state,
)
from .sharding import ShardPlan, contiguous_shard, zigzag_shard

__all__ = [
    "STRATEGY_KINDS",
    "StrategyConfig",
    "StrategyConfigError",
    "StrategyRun",
    "ring_attention",
    "zigzag_ring_attention",
    "ulysses_attention",
    "attention_2d",
    "execute_strategy",
    "plan_for_strategy",
    "effective_kv_heads",
]

STRATEGY_KINDS = ("naive_ring", "zigzag_ring", "ulysses", "two_d")


class StrategyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    """Which scheme to run and how the SP degree factors into (a2a, p2p)."""

    kind: str
    a2a_degree: int = 1
    p2p_degree: int = 1
    kv_replication: bool = False

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise StrategyConfigError(
                f"unknown strategy {self.kind!r} (expected one of {STRATEGY_KINDS})"
            )
        if self.a2a_degree < 1 or self.p2p_degree < 1:
            raise StrategyConfigError("strategy degrees must be >= 1")
        if self.kind in ("naive_ring", "zigzag_ring") and self.a2a_degree != 1:
            raise StrategyConfigError(f"{self.kind} requires a2a_degree == 1")
        if self.kind == "ulysses" and self.p2p_degree != 1:
            raise StrategyConfigError("ulysses requires p2p_degree == 1")

    @property
    def sp_degree(self) -> int:
        return self.a2a_degree * self.p2p_degree

    def validate_heads(self, spec: AttentionSpec) -> None:
        """Check the head-divisibility limits of the a2a factor."""
        effective_kv_heads(spec, self.a2a_degree, self.kv_replication)


def effective_kv_heads(spec: AttentionSpec, degree: int, kv_replication: bool) -> int:
    """KV head count actually sharded by an a2a group of ``degree``.

    Equals ``num_kv_heads`` when the degree divides it; with replication
    enabled, KV heads are duplicated up to the query head count.  Raises
    StrategyConfigError when the degree exceeds the head limits.
    """
    if degree == 1:
        return spec.num_kv_heads
    if degree > spec.num_q_heads:
        raise StrategyConfigError(
            f"degree {degree} exceeds {spec.num_q_heads} query heads"
        )
    if spec.num_q_heads % degree != 0:
        raise StrategyConfigError(
            f"degree {degree} does not divide {spec.num_q_heads} query heads"
        )
    if spec.num_kv_heads % degree == 0:
        return spec.num_kv_heads
    if not kv_replication:
        if degree > spec.num_kv_heads:
            raise StrategyConfigError(
                f"degree {degree} exceeds {spec.num_kv_heads} KV heads; "
                "enable kv_replication"
            )
        raise StrategyConfigError(
            f"degree {degree} does not divide {spec.num_kv_heads} KV heads; "
            "enable kv_replication"
        )
    return spec.num_q_heads  # replicated up to the query head count


def _replicate_kv(kv: np.ndarray, spec: AttentionSpec) -> np.ndarray:
    """Duplicate each KV head group_size times (pre-A2A replication)."""
    return np.repeat(kv, spec.group_size, axis=0)


@dataclass
class StrategyRun:
    """Result of executing one strategy on global inputs."""

    config: StrategyConfig
    plan: ShardPlan
    outputs: list[np.ndarray]  # per-rank (heads, local_len, head_dim)
    log: object  # CommLog

    def gathered(self) -> np.ndarray:
        """Global (heads, padded_len, head_dim) output in position order."""
        return self.plan.gather(self.outputs, axis=1, trim=False)


# ---------------------------------------------------------------------------
# Shared blockwise ring engine
# ---------------------------------------------------------------------------

def _ring_pass(handle, ring_group, q, k, v, q_pos, kv_positions_of):
    """Rotate KV around ``ring_group`` and accumulate blockwise attention.

    ``kv_positions_of(member)`` returns the global positions of the KV rows
    originally held by that ring member.  R-1 point-to-point hops.
    """
    ring = tuple(ring_group)
    size = len(ring)
    me = ring.index(handle.rank)
    state = init_attention_state(q.shape[0], q.shape[1], q.shape[2])
    kv = (k, v)
    for hop in range(size):
        source = ring[(me - hop) % size]
        state = blockwise_attention_step(state, q, kv[0], kv[1], q_pos, kv_positions_of(source))
        if hop < size - 1:
            dst = ring[(me + 1) % size]
            src = ring[(me - 1) % size]
            kv = handle.send_recv(ring, dst, src, kv)
    return finalize_attention(state)


def _check_shards(plan: ShardPlan, shards, name: str, heads: int, head_dim: int) -> None:
    if len(shards) != plan.sp_degree:
        raise ValueError(f"{name}: expected {plan.sp_degree} shards, got {len(shards)}")
    for rank, shard in enumerate(shards):
        expected = (heads, plan.local_length, head_dim)
        if shard.shape != expected:
            raise ValueError(
                f"{name}[{rank}] has shape {shard.shape}, expected {expected}"
            )


def _check_mesh(mesh: DeviceMesh, plan: ShardPlan) -> None:
    if mesh.world_size != plan.sp_degree or mesh.sp_degree != plan.sp_degree:
        raise ValueError(
            f"mesh (world {mesh.world_size}, sp {mesh.sp_degree}) does not match "
            f"plan sp_degree {plan.sp_degree}"
        )


# ---------------------------------------------------------------------------
# Pure ring strategies
# ---------------------------------------------------------------------------

def _run_ring(mesh, plan, q_shards, k_shards, v_shards, spec, expected_kind, fault=None):
    if plan.kind != expected_kind:
        raise ValueError(f"expected a {expected_kind} plan, got {plan.kind!r}")
    _check_mesh(mesh, plan)
    _check_shards(plan, q_shards, "q", spec.num_q_heads, spec.head_dim)
    _check_shards(plan, k_shards, "k", spec.num_kv_heads, spec.head_dim)
    _check_shards(plan, v_shards, "v", spec.num_kv_heads, spec.head_dim)
    ring = tuple(range(plan.sp_degree))

    def program(handle):
        rank = handle.rank
        return _ring_pass(
            handle,
            ring,
            q_shards[rank],
            k_shards[rank],
            v_shards[rank],
            plan.rank_positions(rank),
            plan.rank_positions,
        )

    return run_program(mesh, program, fault=fault)


def ring_attention(mesh, plan, q_shards, k_shards, v_shards, spec, fault=None):
    """Naive ring: contiguous chunks, P-1 KV hops, causally imbalanced."""
    return _run_ring(mesh, plan, q_shards, k_shards, v_shards, spec, "contiguous", fault)


def zigzag_ring_attention(mesh, plan, q_shards, k_shards, v_shards, spec, fault=None):
    """Balanced ring: each rank holds one chunk from each end of the sequence."""
    return _run_ring(mesh, plan, q_shards, k_shards, v_shards, spec, "zigzag", fault)


# ---------------------------------------------------------------------------
# All-to-all head sharding (and the 2D hybrid built on it)
# ---------------------------------------------------------------------------

def _head_slices(total: int, parts: int):
    width = total // parts
    return [slice(i * width, (i + 1) * width) for i in range(parts)]


def attention_rank_body(handle, mesh, plan, spec, q, k, v, kv_replication):
    """Shared body of ulysses and 2D: head-shard, attend, un-shard."""
    a2a_group = mesh.a2a_group_of(handle.rank)
    ring_group = mesh.p2p_group_of(handle.rank)
    degree = len(a2a_group)
    effective_kv = effective_kv_heads(spec, degree, kv_replication)
    if effective_kv != k.shape[0]:
        k = _replicate_kv(k, spec)
        v = _replicate_kv(v, spec)
    if degree > 1:
        q_cuts = _head_slices(spec.num_q_heads, degree)
        kv_cuts = _head_slices(effective_kv, degree)
        shards = [(q[q_cuts[j]], k[kv_cuts[j]], v[kv_cuts[j]]) for j in range(degree)]
        received = handle.all_to_all(a2a_group, shards)
        q_seg = np.concatenate([part[0] for part in received], axis=1)
        k_seg = np.concatenate([part[1] for part in received], axis=1)
        v_seg = np.concatenate([part[2] for part in received], axis=1)
        raw_positions = np.concatenate(
            [plan.rank_positions(member) for member in a2a_group]
        )
        order = np.argsort(raw_positions)
        q_seg, k_seg, v_seg = q_seg[:, order], k_seg[:, order], v_seg[:, order]
        positions = raw_positions[order]
    else:
        q_seg, k_seg, v_seg = q, k, v
        positions = plan.rank_positions(handle.rank)

    def segment_positions(ring_member):
        group = mesh.a2a_group_of(ring_member)
        return np.sort(np.concatenate([plan.rank_positions(m) for m in group]))

    out_seg = _ring_pass(handle, ring_group, q_seg, k_seg, v_seg, positions, segment_positions)

    if degree == 1:
        return out_seg
    # Route each member's rows back (in its own plan-local order) and restack heads.
    out_shards = []
    for member in a2a_group:
        rows = np.searchsorted(positions, plan.rank_positions(member))
        out_shards.append(out_seg[:, rows])
    returned = handle.all_to_all(a2a_group, out_shards)
    return np.concatenate(returned, axis=0)


def ulysses_attention(mesh, q_shards, k_shards, v_shards, spec,
                      kv_replication: bool = False, plan: ShardPlan | None = None,
                      fault=None):
    """All-to-all head sharding over contiguous sequence shards.

    The first exchange turns (seq/P, all heads) into (full seq, heads/P);
    each rank attends its head slice over the whole sequence; the second
    exchange restores sequence sharding.  The degree is capped by the head
    counts: KV heads without replication, query heads with it.
    """
    if mesh.p2p_degree != 1 or mesh.a2a_degree != mesh.world_size:
        raise ValueError("ulysses requires a mesh with p2p_degree == 1 spanning the world")
    degree = mesh.a2a_degree
    effective_kv_heads(spec, degree, kv_replication)
    if plan is None:
        plan = contiguous_shard(q_shards[0].shape[1] * degree, degree)
    if plan.kind != "contiguous":
        raise ValueError("ulysses operates on contiguous sequence shards")
    _check_mesh(mesh, plan)
    _check_shards(plan, q_shards, "q", spec.num_q_heads, spec.head_dim)
    _check_shards(plan, k_shards, "k", spec.num_kv_heads, spec.head_dim)
    _check_shards(plan, v_shards, "v", spec.num_kv_heads, spec.head_dim)

    def program(handle):
        rank = handle.rank
        return attention_rank_body(
            handle, mesh, plan, spec,
            q_shards[rank], k_shards[rank], v_shards[rank], kv_replication,
        )

    return run_program(mesh, program, fault=fault)


def attention_2d(mesh, plan, q_shards, k_shards, v_shards, spec,
                 kv_replication: bool = False, fault=None):
    """Hybrid strategy: intra-group A2A head sharding, inter-group KV ring.

    The zigzag plan is laid out so every a2a group's combined tokens form a
    two-end chunk pair at ring granularity, keeping the ring causally
    balanced.  With a2a_degree == 1 this is exactly the zigzag ring; with
    p2p_degree == 1 it is exactly ulysses.
    """
    if plan.kind != "zigzag":
        raise ValueError("attention_2d requires a zigzag plan")
    _check_mesh(mesh, plan)
    effective_kv_heads(spec, mesh.a2a_degree, kv_replication)
    _check_shards(plan, q_shards, "q", spec.num_q_heads, spec.head_dim)
    _check_shards(plan, k_shards, "k", spec.num_kv_heads, spec.head_dim)
    _check_shards(plan, v_shards, "v", spec.num_kv_heads, spec.head_dim)

    def program(handle):
        rank = handle.rank
        return attention_rank_body(
            handle, mesh, plan, spec,
            q_shards[rank], k_shards[rank], v_shards[rank], kv_replication,
        )

    return run_program(mesh, program, fault=fault)


# ---------------------------------------------------------------------------
# Uniform front door used by verification and the CLI
# ---------------------------------------------------------------------------

def plan_for_strategy(config: StrategyConfig, length: int) -> ShardPlan:
    """The shard plan a strategy runs on, for an already-divisible length."""
    if config.kind in ("naive_ring", "ulysses"):
        return contiguous_shard(length, config.sp_degree)
    return zigzag_shard(length, config.sp_degree)


def execute_strategy(mesh: DeviceMesh, config: StrategyConfig, spec: AttentionSpec,
                     q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     fault=None) -> StrategyRun:
    """Shard global q/k/v per the strategy's plan, run it, return the result.

    Inputs are global (heads, length, head_dim) arrays whose length already
    divides the plan granularity (2 x sp for zigzag plans, sp otherwise).
    """
    if config.sp_degree != mesh.sp_degree or mesh.world_size != mesh.sp_degree:
        raise ValueError(
            f"strategy {config.kind} (sp {config.sp_degree}) does not match mesh "
            f"(world {mesh.world_size}, a2a {mesh.a2a_degree}, p2p {mesh.p2p_degree})"
        )
    config.validate_heads(spec)
    plan = plan_for_strategy(config, q.shape[1])
    q_shards = plan.shard(q, axis=1)
    k_shards = plan.shard(k, axis=1)
    v_shards = plan.shard(v, axis=1)
    if config.kind == "naive_ring":
        outputs, log = ring_attention(mesh, plan, q_shards, k_shards, v_shards, spec,
                                      fault=fault)
    elif config.kind == "zigzag_ring":
        outputs, log = zigzag_ring_attention(mesh, plan, q_shards, k_shards, v_shards,
                                             spec, fault=fault)
    elif config.kind == "ulysses":
        outputs, log = ulysses_attention(
            mesh, q_shards, k_shards, v_shards, spec,
            kv_replication=config.kv_replication, plan=plan, fault=fault,
        )
    else:
        outputs, log = attention_2d(
            mesh, plan, q_shards, k_shards, v_shards, spec,
            kv_replication=config.kv_replication, fault=fault,
        )
    return StrategyRun(config=config, plan=plan, outputs=outputs, log=log)
