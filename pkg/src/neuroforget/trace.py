"""Activation traces and the FIAT binary container.

A trace holds, for a set of linear layers, the weight matrix of each layer
and the input activations recorded at every (timestep, prompt) of a set of
sampling runs. Everything is little-endian; float payloads are float32.

Layout::

    b"FIAT" u16 version u16 reserved
    u32 layer_count
      per layer: u16 len + utf8 id, u32 c_in, u32 c_out, u8 kind,
                 f32[c_out*c_in] weights (row-major), u32 N
    u32 group_count
      per group: u16 len + utf8 id, u8 kind, u16 len + utf8 concept id,
                 u32 prompt_count
    u32 total_timesteps
    u64 record_count
      per record: u32 layer_index, u32 timestep, u32 group_index,
                  u32 prompt_index, f32[N*c_in] activations (row-major)
    u64 record_count (sentinel)
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"FIAT"
VERSION = 1

_F32 = np.dtype("<f4")


class TraceError(Exception):
    """Base class for trace validation and format errors."""


class BadMagicError(TraceError):
    pass


class UnsupportedVersionError(TraceError):
    pass


class TruncatedTraceError(TraceError):
    pass


class ShapeMismatchError(TraceError):
    pass


class NonFiniteError(TraceError):
    pass


class DuplicateRecordError(TraceError):
    pass


class UnknownIdentifierError(TraceError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TargetKind(enum.IntEnum):
    FFN1 = 0
    FFN2 = 1
    ATTN_K = 2
    ATTN_V = 3
    OTHER = 4


class GroupKind(enum.IntEnum):
    CONCEPT = 0
    BASE = 1


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    c_in: int
    c_out: int
    target_kind: TargetKind = TargetKind.OTHER

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ShapeMismatchError(f"layer {self.layer_id!r}: c_in and c_out must be >= 1")
        object.__setattr__(self, "target_kind", TargetKind(self.target_kind))


@dataclass(frozen=True)
class PromptGroup:
    group_id: str
    kind: GroupKind
    prompt_count: int
    concept_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", GroupKind(self.kind))
        if self.prompt_count < 1:
            raise TraceError(f"group {self.group_id!r}: prompt_count must be >= 1")
        if self.kind is GroupKind.CONCEPT and not self.concept_id:
            raise TraceError(f"group {self.group_id!r}: CONCEPT groups need a concept_id")
        if self.kind is GroupKind.BASE:
            if self.concept_id:
                raise TraceError(f"group {self.group_id!r}: BASE groups carry no concept_id")
            # the base standard deviation needs two samples
            if self.prompt_count < 2:
                raise TraceError(f"group {self.group_id!r}: BASE groups need prompt_count >= 2")


@dataclass(frozen=True)
class ActivationRecord:
    layer_id: str
    timestep: int
    group_id: str
    prompt_index: int
    activations: np.ndarray  # N x C_in, float32


RecordKey = tuple  # (layer_id, timestep, group_id, prompt_index)


@dataclass
class ActivationTrace:
    """Layer weights plus per-(timestep, prompt) input activations.

    ``weights`` maps layer_id to a C_out x C_in float32 matrix.
    ``records`` maps (layer_id, timestep, group_id, prompt_index) to an
    N x C_in float32 matrix.
    """

    layers: list[LayerSpec]
    weights: dict[str, np.ndarray]
    groups: list[PromptGroup]
    total_timesteps: int
    records: dict[RecordKey, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = {k: np.ascontiguousarray(v, dtype=_F32) for k, v in self.weights.items()}
        self.records = {k: np.ascontiguousarray(v, dtype=_F32) for k, v in self.records.items()}
        self.validate()

    # -- lookup -----------------------------------------------------------

    def layer(self, layer_id: str) -> LayerSpec:
        for spec in self.layers:
            if spec.layer_id == layer_id:
                return spec
        raise UnknownIdentifierError(f"unknown layer {layer_id!r}")

    def group(self, group_id: str) -> PromptGroup:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise UnknownIdentifierError(f"unknown group {group_id!r}")

    def concept_group(self, concept_id: str) -> PromptGroup:
        for g in self.groups:
            if g.kind is GroupKind.CONCEPT and g.concept_id == concept_id:
                return g
        raise UnknownIdentifierError(f"no group for concept {concept_id!r}")

    def base_groups(self) -> list[PromptGroup]:
        return [g for g in self.groups if g.kind is GroupKind.BASE]

    def positions(self, layer_id: str) -> int:
        """Flattened position count N of a layer (0 if it has no records)."""
        for key, acts in self.records.items():
            if key[0] == layer_id:
                return acts.shape[0]
        return 0

    def add_record(self, record: ActivationRecord) -> None:
        key = (record.layer_id, record.timestep, record.group_id, record.prompt_index)
        if key in self.records:
            raise DuplicateRecordError(f"duplicate record {key}")
        self.records[key] = np.ascontiguousarray(record.activations, dtype=_F32)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        if self.total_timesteps < 1:
            raise TraceError("total_timesteps must be >= 1")
        ids = [s.layer_id for s in self.layers]
        if len(set(ids)) != len(ids):
            raise TraceError("layer ids must be unique")
        gids = [g.group_id for g in self.groups]
        if len(set(gids)) != len(gids):
            raise TraceError("group ids must be unique")
        if set(self.weights) != set(ids):
            raise ShapeMismatchError("weights must be given for exactly the declared layers")
        for spec in self.layers:
            w = self.weights[spec.layer_id]
            if w.shape != (spec.c_out, spec.c_in):
                raise ShapeMismatchError(
                    f"layer {spec.layer_id!r}: weights {w.shape} != ({spec.c_out}, {spec.c_in})"
                )
            if not np.all(np.isfinite(w)):
                raise NonFiniteError(f"layer {spec.layer_id!r}: non-finite weights")
        specs = {s.layer_id: s for s in self.layers}
        groups = {g.group_id: g for g in self.groups}
        n_by_layer: dict[str, int] = {}
        for key, acts in self.records.items():
            layer_id, t, group_id, p = key
            if layer_id not in specs:
                raise UnknownIdentifierError(f"record {key}: unknown layer")
            if group_id not in groups:
                raise UnknownIdentifierError(f"record {key}: unknown group")
            if not 1 <= t <= self.total_timesteps:
                raise TraceError(f"record {key}: timestep outside [1, {self.total_timesteps}]")
            if not 0 <= p < groups[group_id].prompt_count:
                raise TraceError(f"record {key}: prompt_index out of range")
            if acts.ndim != 2 or acts.shape[1] != specs[layer_id].c_in:
                raise ShapeMismatchError(f"record {key}: activations shape {acts.shape}")
            n = n_by_layer.setdefault(layer_id, acts.shape[0])
            if acts.shape[0] != n:
                raise ShapeMismatchError(f"record {key}: N={acts.shape[0]} but layer uses N={n}")
            if not np.all(np.isfinite(acts)):
                raise NonFiniteError(f"record {key}: non-finite activations")

    # -- comparison -------------------------------------------------------

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationTrace):
            return NotImplemented
        if (self.layers, self.groups, self.total_timesteps) != (
            other.layers,
            other.groups,
            other.total_timesteps,
        ):
            return False
        if set(self.weights) != set(other.weights) or set(self.records) != set(other.records):
            return False
        for k, w in self.weights.items():
            if w.shape != other.weights[k].shape or w.tobytes() != other.weights[k].tobytes():
                return False
        for k, a in self.records.items():
            if a.shape != other.records[k].shape or a.tobytes() != other.records[k].tobytes():
                return False
        return True

    __hash__ = None


def slice_records(
    trace: ActivationTrace, layer_id: str, timestep: int, group_id: str
) -> list[ActivationRecord]:
    """All prompt records of one (layer, timestep, group), ordered by prompt index."""
    trace.layer(layer_id)
    group = trace.group(group_id)
    out = []
    for p in range(group.prompt_count):
        acts = trace.records.get((layer_id, timestep, group_id, p))
        if acts is not None:
            out.append(ActivationRecord(layer_id, timestep, group_id, p, acts))
    return out


# -- serialization ----------------------------------------------------------


def _pack_str(s: str, fmt: str = "<H") -> bytes:
    data = s.encode("utf-8")
    return struct.pack(fmt, len(data)) + data


def _sorted_keys(trace: ActivationTrace) -> list[RecordKey]:
    layer_pos = {s.layer_id: i for i, s in enumerate(trace.layers)}
    group_pos = {g.group_id: i for i, g in enumerate(trace.groups)}
    return sorted(trace.records, key=lambda k: (layer_pos[k[0]], k[1], group_pos[k[2]], k[3]))


def encode_trace(trace: ActivationTrace) -> bytes:
    trace.validate()
    layer_pos = {s.layer_id: i for i, s in enumerate(trace.layers)}
    group_pos = {g.group_id: i for i, g in enumerate(trace.groups)}
    parts = [MAGIC, struct.pack("<HH", VERSION, 0), struct.pack("<I", len(trace.layers))]
    for spec in trace.layers:
        parts.append(_pack_str(spec.layer_id))
        parts.append(struct.pack("<IIB", spec.c_in, spec.c_out, int(spec.target_kind)))
        parts.append(trace.weights[spec.layer_id].astype(_F32).tobytes())
        parts.append(struct.pack("<I", trace.positions(spec.layer_id)))
    parts.append(struct.pack("<I", len(trace.groups)))
    for g in trace.groups:
        parts.append(_pack_str(g.group_id))
        parts.append(struct.pack("<B", int(g.kind)))
        parts.append(_pack_str(g.concept_id or ""))
        parts.append(struct.pack("<I", g.prompt_count))
    parts.append(struct.pack("<I", trace.total_timesteps))
    keys = _sorted_keys(trace)
    parts.append(struct.pack("<Q", len(keys)))
    for key in keys:
        layer_id, t, group_id, p = key
        parts.append(struct.pack("<IIII", layer_pos[layer_id], t, group_pos[group_id], p))
        parts.append(trace.records[key].tobytes())
    parts.append(struct.pack("<Q", len(keys)))
    return b"".join(parts)


def write_trace(trace: ActivationTrace, sink: BinaryIO | str | Path) -> int:
    """Serialize ``trace``; returns the number of bytes written."""
    data = encode_trace(trace)  # validates before any byte is written
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedTraceError("truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_F32).copy()


def decode_trace(data: bytes) -> ActivationTrace:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic")
    r.take(4)
    version, _reserved = r.unpack("<HH")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")

    (layer_count,) = r.unpack("<I")
    layers, weights, positions = [], {}, []
    for _ in range(layer_count):
        layer_id = r.string()
        c_in, c_out, kind = r.unpack("<IIB")
        spec = LayerSpec(layer_id, c_in, c_out, TargetKind(kind))
        w = r.floats(c_out * c_in).reshape(c_out, c_in)
        (n,) = r.unpack("<I")
        layers.append(spec)
        weights[layer_id] = w
        positions.append(n)

    (group_count,) = r.unpack("<I")
    groups = []
    for _ in range(group_count):
        group_id = r.string()
        (kind,) = r.unpack("<B")
        concept_id = r.string() or None
        (prompt_count,) = r.unpack("<I")
        groups.append(PromptGroup(group_id, GroupKind(kind), prompt_count, concept_id))

    (total_timesteps,) = r.unpack("<I")
    (record_count,) = r.unpack("<Q")
    records: dict[RecordKey, np.ndarray] = {}
    for _ in range(record_count):
        li, t, gi, p = r.unpack("<IIII")
        if li >= layer_count or gi >= group_count:
            raise ShapeMismatchError(f"record references layer {li} / group {gi} out of range")
        spec = layers[li]
        n = positions[li]
        acts = r.floats(n * spec.c_in).reshape(n, spec.c_in)
        key = (spec.layer_id, t, groups[gi].group_id, p)
        if key in records:
            raise DuplicateRecordError(f"duplicate record {key}")
        records[key] = acts
    (sentinel,) = r.unpack("<Q")
    if sentinel != record_count:
        raise TruncatedTraceError("truncated")
    if r.pos != len(data):
        raise TraceError("trailing bytes after sentinel")
    return ActivationTrace(layers, weights, groups, total_timesteps, records)


def read_trace(source: BinaryIO | str | Path | bytes) -> ActivationTrace:
    if isinstance(source, bytes):
        return decode_trace(source)
    if isinstance(source, (str, Path)):
        return decode_trace(Path(source).read_bytes())
    return decode_trace(source.read())


def build_trace(
    layers: Iterable[tuple[LayerSpec, np.ndarray]],
    groups: Iterable[PromptGroup],
    total_timesteps: int,
    records: Iterable[ActivationRecord] = (),
) -> ActivationTrace:
    """Convenience constructor from (spec, weights) pairs and records."""
    layers = list(layers)
    trace = ActivationTrace(
        [s for s, _ in layers], {s.layer_id: w for s, w in layers}, list(groups), total_timesteps
    )
    for rec in records:
        trace.add_record(rec)
    trace.validate()
    return trace


def roundtrip(trace: ActivationTrace) -> ActivationTrace:
    buf = io.BytesIO()
    write_trace(trace, buf)
    return read_trace(buf.getvalue())
