"""Two-stage multimodal token sharding.

Stage 1 balances image-encoding work by distributing frames evenly across
the sequence-parallel group; stage 2 aggregates the encoded batch into one
flat token sequence, pads it with dummy tokens until it divides evenly, and
re-shards it from both ends (zigzag) so causal-attention compute is equal
across ranks.  The vision encoder is replaced by a deterministic stub: the
system under test is the sharding, not the modeling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fabric import DeviceMesh

__all__ = [
    "TextToken",
    "ImagePlaceholder",
    "MultimodalSequence",
    "EncodedPiece",
    "EncodedSequence",
    "ShardPlan",
    "SampleSpec",
    "contiguous_shard",
    "zigzag_shard",
    "padded_length_for",
    "distribute_images",
    "encode_images_stub",
    "text_embedding_stub",
    "encode_batch",
    "globalize_and_pad",
    "gather_unshard",
    "chunk_pair_counts",
    "chunk_workload_units",
    "load_samples",
    "build_sequences",
]

KIND_TEXT = 0
KIND_VISION = 1
KIND_DUMMY = 2

_VISION_STUB_SEED = 0x51AB
_TEXT_STUB_SEED = 0x7E47


@dataclass(frozen=True)
class TextToken:
    token_id: int


@dataclass(frozen=True)
class ImagePlaceholder:
    frame_id: int


@dataclass(frozen=True)
class MultimodalSequence:
    """One training sample: interleaved text tokens and image placeholders."""

    sample_id: int
    elements: tuple

    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self.elements if isinstance(e, ImagePlaceholder)]


@dataclass(frozen=True)
class EncodedPiece:
    """Encoded rows of one element, tagged with its place in the batch."""

    sample_index: int
    element_index: int
    kind: int
    embeddings: np.ndarray  # (rows, hidden)


@dataclass
class EncodedSequence:
    """Flat global token sequence with per-position bookkeeping."""

    embeddings: np.ndarray  # (length, hidden)
    kinds: np.ndarray  # (length,) uint8
    positions: np.ndarray  # (length,) int64, strictly increasing
    loss_mask: np.ndarray  # (length,) bool
    original_length: int

    def __post_init__(self) -> None:
        n = self.embeddings.shape[0]
        if not (self.kinds.shape == self.positions.shape == self.loss_mask.shape == (n,)):
            raise ValueError("per-position metadata does not match embedding rows")
        if n > 1 and np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")
        if np.any(self.loss_mask[self.kinds == KIND_DUMMY]):
            raise ValueError("dummy positions must have loss_mask false")


@dataclass(frozen=True)
class ShardPlan:
    """Assignment of equal token chunks to ranks.

    ``contiguous`` gives rank i chunk i (of sp chunks); ``zigzag`` gives rank
    i chunks {i, 2P-1-i} (of 2P chunks), taken from both ends of the sequence
    so each rank's causal workload is equal.
    """

    kind: str  # "contiguous" | "zigzag"
    sp_degree: int
    chunk_size: int
    padded_length: int
    original_length: int
    assignments: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self) -> None:
        owned = sorted(c for chunks in self.assignments for c in chunks)
        if owned != list(range(self.num_chunks)):
            raise ValueError("chunk assignments do not partition the sequence")

    @property
    def num_chunks(self) -> int:
        return self.padded_length // self.chunk_size

    @property
    def local_length(self) -> int:
        return self.padded_length // self.sp_degree

    def chunk_positions(self, chunk: int) -> np.ndarray:
        start = chunk * self.chunk_size
        return np.arange(start, start + self.chunk_size, dtype=np.int64)

    def rank_positions(self, rank: int) -> np.ndarray:
        return np.concatenate([self.chunk_positions(c) for c in self.assignments[rank]])

    def rank_of_chunk(self, chunk: int) -> int:
        for rank, chunks in enumerate(self.assignments):
            if chunk in chunks:
                return rank
        raise ValueError(f"chunk {chunk} not assigned")

    def rank_of_position(self, position: int) -> int:
        return self.rank_of_chunk(position // self.chunk_size)

    def shard(self, array: np.ndarray, axis: int = 0) -> list[np.ndarray]:
        """Split a global array (padded length along ``axis``) into rank shards."""
        if array.shape[axis] != self.padded_length:
            raise ValueError(
                f"axis {axis} has length {array.shape[axis]}, "
                f"expected padded length {self.padded_length}"
            )
        return [np.take(array, self.rank_positions(r), axis=axis) for r in range(self.sp_degree)]

    def gather(self, shards, axis: int = 0, trim: bool = True) -> np.ndarray:
        """Inverse of shard: reassemble global order, dropping dummy padding."""
        if len(shards) != self.sp_degree:
            raise ValueError(f"expected {self.sp_degree} shards, got {len(shards)}")
        shape = list(shards[0].shape)
        shape[axis] = self.padded_length
        out = np.empty(shape, dtype=shards[0].dtype)
        for rank, shard in enumerate(shards):
            positions = self.rank_positions(rank)
            if shard.shape[axis] != positions.size:
                raise ValueError(f"rank {rank} shard has wrong length")
            idx = [slice(None)] * out.ndim
            idx[axis] = positions
            out[tuple(idx)] = shard
        if trim and self.original_length < self.padded_length:
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(0, self.original_length)
            out = out[tuple(idx)]
        return out


def contiguous_shard(padded_length: int, sp_degree: int,
                     original_length: int | None = None) -> ShardPlan:
    if sp_degree < 1:
        raise ValueError("sp_degree must be >= 1")
    if padded_length % sp_degree != 0:
        raise ValueError(f"length {padded_length} not divisible by sp_degree {sp_degree}")
    return ShardPlan(
        kind="contiguous",
        sp_degree=sp_degree,
        chunk_size=padded_length // sp_degree,
        padded_length=padded_length,
        original_length=padded_length if original_length is None else original_length,
        assignments=tuple((r,) for r in range(sp_degree)),
    )


def zigzag_shard(padded_length: int, sp_degree: int,
                 original_length: int | None = None) -> ShardPlan:
    """Two-end balanced sharding: 2P chunks, rank i owns {i, 2P-1-i}."""
    if sp_degree < 1:
        raise ValueError("sp_degree must be >= 1")
    if padded_length % (2 * sp_degree) != 0:
        raise ValueError(
            f"length {padded_length} not divisible by 2 * sp_degree = {2 * sp_degree}"
        )
    two_p = 2 * sp_degree
    return ShardPlan(
        kind="zigzag",
        sp_degree=sp_degree,
        chunk_size=padded_length // two_p,
        padded_length=padded_length,
        original_length=padded_length if original_length is None else original_length,
        assignments=tuple((r, two_p - 1 - r) for r in range(sp_degree)),
    )


def padded_length_for(length: int, mesh: DeviceMesh) -> int:
    """Least multiple of (2 x ring_degree x a2a_degree) that is >= length."""
    granule = 2 * mesh.p2p_degree * mesh.a2a_degree
    return max(granule, ((length + granule - 1) // granule) * granule)


# ---------------------------------------------------------------------------
# Stage 1: frame distribution and the deterministic encoder stub
# ---------------------------------------------------------------------------

def distribute_images(batch, sp_degree: int) -> list[list[tuple[int, int]]]:
    """Split the batch's frames (in sample order) across the SP group.

    Returns, per rank, a list of (sample_index, frame_id).  Counts differ by
    at most one; the first ``total % sp`` ranks take the extra frame.
    """
    if sp_degree < 1:
        raise ValueError("sp_degree must be >= 1")
    frames = [
        (si, element.frame_id)
        for si, sample in enumerate(batch)
        for element in sample.elements
        if isinstance(element, ImagePlaceholder)
    ]
    total = len(frames)
    base, extra = divmod(total, sp_degree)
    out: list[list[tuple[int, int]]] = []
    cursor = 0
    for rank in range(sp_degree):
        take = base + (1 if rank < extra else 0)
        out.append(frames[cursor:cursor + take])
        cursor += take
    return out


def encode_images_stub(frame_ids, tokens_per_frame: int, hidden: int) -> dict[int, np.ndarray]:
    """Deterministic pseudo-encoder: embeddings depend only on the frame id.

    The same frame encodes identically no matter which rank processes it,
    which is what makes the stage-2 global gather location-independent.
    """
    if tokens_per_frame < 1:
        raise ValueError("tokens_per_frame must be >= 1")
    out = {}
    for frame_id in frame_ids:
        rng = np.random.default_rng([_VISION_STUB_SEED, int(frame_id)])
        out[frame_id] = rng.standard_normal((tokens_per_frame, hidden))
    return out


def text_embedding_stub(token_ids, hidden: int) -> np.ndarray:
    """Deterministic per-token-id embeddings for text rows."""
    rows = np.empty((len(token_ids), hidden))
    for i, token_id in enumerate(token_ids):
        rng = np.random.default_rng([_TEXT_STUB_SEED, int(token_id)])
        rows[i] = rng.standard_normal(hidden)
    return rows


def encode_batch(batch, tokens_per_frame: int, hidden: int,
                 assignments=None) -> list[EncodedPiece]:
    """Encode every element of the batch into pieces carrying sample order.

    ``assignments`` (from distribute_images) only decides where encoding
    would run; it never changes the produced embeddings.
    """
    frame_ids = [fid for sample in batch for fid in sample.frame_ids()]
    frame_rows = encode_images_stub(frame_ids, tokens_per_frame, hidden)
    pieces = []
    for si, sample in enumerate(batch):
        for ei, element in enumerate(sample.elements):
            if isinstance(element, ImagePlaceholder):
                pieces.append(
                    EncodedPiece(si, ei, KIND_VISION, frame_rows[element.frame_id])
                )
            else:
                pieces.append(
                    EncodedPiece(
                        si, ei, KIND_TEXT, text_embedding_stub([element.token_id], hidden)
                    )
                )
    return pieces


# ---------------------------------------------------------------------------
# Stage 2: global aggregation, dummy padding and the zigzag plan
# ---------------------------------------------------------------------------

def globalize_and_pad(pieces, mesh: DeviceMesh) -> tuple[EncodedSequence, ShardPlan]:
    """Aggregate encoded pieces into one flat padded sequence plus its plan.

    Pieces are reassembled in (sample, element) order regardless of where
    they were encoded; dummy zero rows are appended at the end until the
    length divides 2 x sp_degree, with loss_mask false on every dummy.
    """
    ordered = sorted(pieces, key=lambda p: (p.sample_index, p.element_index))
    if not ordered:
        raise ValueError("cannot globalize an empty batch")
    hidden = ordered[0].embeddings.shape[1]
    rows = np.concatenate([p.embeddings for p in ordered], axis=0)
    kinds = np.concatenate(
        [np.full(p.embeddings.shape[0], p.kind, dtype=np.uint8) for p in ordered]
    )
    original = rows.shape[0]
    padded = padded_length_for(original, mesh)
    if padded > original:
        rows = np.concatenate([rows, np.zeros((padded - original, hidden))], axis=0)
        kinds = np.concatenate(
            [kinds, np.full(padded - original, KIND_DUMMY, dtype=np.uint8)]
        )
    encoded = EncodedSequence(
        embeddings=rows,
        kinds=kinds,
        positions=np.arange(padded, dtype=np.int64),
        loss_mask=kinds == KIND_TEXT,
        original_length=original,
    )
    plan = zigzag_shard(padded, mesh.sp_degree, original_length=original)
    return encoded, plan


def gather_unshard(plan: ShardPlan, shards, axis: int = 0) -> np.ndarray:
    """Reassemble per-rank shards into the original (unpadded) sequence."""
    return plan.gather(shards, axis=axis, trim=True)


# ---------------------------------------------------------------------------
# Causal workload accounting over chunked plans
# ---------------------------------------------------------------------------

def _classify_chunk_pair(plan: ShardPlan, q_chunk: int, k_chunk: int) -> str:
    """Brute-force a (query-chunk, key-chunk) pair: full, partial or masked."""
    q_pos = plan.chunk_positions(q_chunk)
    k_pos = plan.chunk_positions(k_chunk)
    allowed = k_pos[np.newaxis, :] <= q_pos[:, np.newaxis]
    count = int(allowed.sum())
    if count == 0:
        return "masked"
    if count == allowed.size:
        return "full"
    return "partial"


def chunk_pair_counts(plan: ShardPlan) -> list[int]:
    """Per-rank count of unmasked (query-chunk, key-chunk) pairs.

    Every rank sees every key chunk over the ring, so the count is taken
    over the rank's query chunks against all chunks of the plan.
    """
    counts = []
    for chunks in plan.assignments:
        n = 0
        for qc in chunks:
            for kc in range(plan.num_chunks):
                if _classify_chunk_pair(plan, qc, kc) != "masked":
                    n += 1
        counts.append(n)
    return counts


def chunk_workload_units(plan: ShardPlan) -> list[int]:
    """Per-rank causal compute in triangle units.

    A fully unmasked chunk pair costs 2 units, the partially masked diagonal
    pair costs 1, a masked pair costs 0; this makes the contiguous-sharding
    imbalance exact: rank i carries 2i+1 units.
    """
    units = []
    for chunks in plan.assignments:
        n = 0
        for qc in chunks:
            for kc in range(plan.num_chunks):
                kind = _classify_chunk_pair(plan, qc, kc)
                if kind == "full":
                    n += 2
                elif kind == "partial":
                    n += 1
        units.append(n)
    return units


# ---------------------------------------------------------------------------
# Workload sample files (no real video decoding)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """One workload sample: how many frames and how many text tokens."""

    sample_id: int
    num_frames: int
    num_text_tokens: int


def load_samples(path) -> list[SampleSpec]:
    """Parse a sample file: one `sample_id num_frames num_text_tokens` per line.

    Blank lines and `#` comments are ignored.
    """
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 'sample_id frames text_tokens', got {raw!r}"
                )
            try:
                sid, frames, text = (int(p) for p in parts)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-integer field in {raw!r}") from exc
            if frames < 0 or text < 0:
                raise ValueError(f"{path}:{lineno}: counts must be >= 0")
            samples.append(SampleSpec(sid, frames, text))
    return samples


def build_sequences(samples, text_vocab: int = 1024) -> list[MultimodalSequence]:
    """Materialize deterministic multimodal sequences from sample specs.

    Text token ids and frame ids are derived from the sample id alone, so a
    workload file always replays to the same batch.
    """
    sequences = []
    next_frame_id = 0
    for spec in samples:
        elements: list = []
        for _ in range(spec.num_frames):
            elements.append(ImagePlaceholder(next_frame_id))
            next_frame_id += 1
        for i in range(spec.num_text_tokens):
            elements.append(TextToken((spec.sample_id * 10007 + i) % text_vocab))
        sequences.append(MultimodalSequence(spec.sample_id, tuple(elements)))
    return sequences
