import io
import struct

import numpy as np
import pytest
from _strategies import traces
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroforget.trace import (
    ActivationRecord,
    ActivationTrace,
    BadMagicError,
    DuplicateRecordError,
    GroupKind,
    LayerSpec,
    NonFiniteError,
    PromptGroup,
    ShapeMismatchError,
    TargetKind,
    TraceError,
    TruncatedTraceError,
    UnknownIdentifierError,
    UnsupportedVersionError,
    build_trace,
    decode_trace,
    encode_trace,
    read_trace,
    roundtrip,
    slice_records,
    write_trace,
)


def small_trace(T=3, prompts=4, n=2):
    rng = np.random.default_rng(0)
    layers = [LayerSpec("ffn1", 3, 2, TargetKind.FFN1), LayerSpec("ffn2", 2, 3, TargetKind.FFN2)]
    weights = {s.layer_id: rng.standard_normal((s.c_out, s.c_in)).astype(np.float32) for s in layers}
    groups = [PromptGroup("dog", GroupKind.CONCEPT, prompts, "dog"), PromptGroup("base", GroupKind.BASE, prompts)]
    records = {
        (s.layer_id, t, g.group_id, p): rng.standard_normal((n, s.c_in)).astype(np.float32)
        for s in layers
        for t in range(1, T + 1)
        for g in groups
        for p in range(prompts)
    }
    return ActivationTrace(layers, weights, groups, T, records)


def hand_encode(layers, weights, groups, T, records, n_by_layer):
    """Independent byte-level encoder following the documented layout."""
    out = bytearray(b"FIAT") + struct.pack("<HH", 1, 0) + struct.pack("<I", len(layers))
    for s in layers:
        lid = s.layer_id.encode()
        out += struct.pack("<H", len(lid)) + lid + struct.pack("<IIB", s.c_in, s.c_out, int(s.target_kind))
        for v in np.asarray(weights[s.layer_id], dtype=np.float64).ravel():
            out += struct.pack("<f", v)
        out += struct.pack("<I", n_by_layer[s.layer_id])
    out += struct.pack("<I", len(groups))
    for g in groups:
        gid, cid = g.group_id.encode(), (g.concept_id or "").encode()
        out += struct.pack("<H", len(gid)) + gid + struct.pack("<B", int(g.kind))
        out += struct.pack("<H", len(cid)) + cid + struct.pack("<I", g.prompt_count)
    out += struct.pack("<I", T) + struct.pack("<Q", len(records))
    for (li, t, gi, p), acts in records:
        out += struct.pack("<IIII", li, t, gi, p)
        for v in np.asarray(acts, dtype=np.float64).ravel():
            out += struct.pack("<f", v)
    out += struct.pack("<Q", len(records))
    return bytes(out)


def test_empty_trace_is_header_only():
    empty = ActivationTrace([], {}, [], 1)
    data = encode_trace(empty)
    # magic, version, reserved, layer count, group count, T, record count, sentinel
    assert len(data) == struct.calcsize("<4sHHIIIQQ") == 36
    assert data[:4] == b"FIAT"
    assert read_trace(data) == empty


def test_bytes_match_hand_encoder():
    layers = [LayerSpec("a", 2, 1, TargetKind.FFN2)]
    weights = {"a": np.array([[0.5, -2.0]], dtype=np.float32)}
    groups = [PromptGroup("base", GroupKind.BASE, 2), PromptGroup("c", GroupKind.CONCEPT, 1, "cat")]
    recs = {("a", 1, "base", 1): np.array([[1.0, 2.0]]), ("a", 1, "base", 0): np.array([[3.0, 4.0]]), ("a", 2, "c", 0): np.array([[5.0, 6.0]])}
    trace = ActivationTrace(layers, weights, groups, 2, recs)
    expected = hand_encode(
        layers, weights, groups, 2,
        [((0, 1, 0, 0), [[3, 4]]), ((0, 1, 0, 1), [[1, 2]]), ((0, 2, 1, 0), [[5, 6]])],
        {"a": 1},
    )
    assert encode_trace(trace) == expected


def test_two_layer_roundtrip_field_by_field():
    t = small_trace(T=3, prompts=4)
    back = roundtrip(t)
    assert [(s.layer_id, s.c_in, s.c_out, s.target_kind) for s in back.layers] == [
        (s.layer_id, s.c_in, s.c_out, s.target_kind) for s in t.layers
    ]
    assert [(g.group_id, g.kind, g.prompt_count, g.concept_id) for g in back.groups] == [
        (g.group_id, g.kind, g.prompt_count, g.concept_id) for g in t.groups
    ]
    assert back.total_timesteps == 3
    for k, w in t.weights.items():
        assert back.weights[k].dtype == np.float32
        assert np.array_equal(back.weights[k].view(np.uint32), w.view(np.uint32))
    assert set(back.records) == set(t.records)
    assert len(back.records) == 2 * 3 * 2 * 4
    for k, a in t.records.items():
        assert np.array_equal(back.records[k].view(np.uint32), a.view(np.uint32))


@settings(max_examples=60)
@given(traces())
def test_roundtrip_identity(trace):
    data = encode_trace(trace)
    back = decode_trace(data)
    assert back == trace
    assert encode_trace(back) == data


def test_roundtrip_keeps_signed_zero_and_subnormals():
    layers = [LayerSpec("l", 3, 1)]
    w = np.array([[-0.0, 1e-45, np.float32(3.4e38)]], dtype=np.float32)
    trace = ActivationTrace(layers, {"l": w}, [PromptGroup("b", GroupKind.BASE, 2)], 1, {("l", 1, "b", 0): w.copy()})
    back = roundtrip(trace)
    assert back.weights["l"].tobytes() == w.tobytes()


def test_write_to_stream_and_path(tmp_path):
    t = small_trace()
    buf = io.BytesIO()
    n = write_trace(t, buf)
    assert n == len(buf.getvalue())
    write_trace(t, tmp_path / "t.fiat")
    assert (tmp_path / "t.fiat").read_bytes() == buf.getvalue()
    assert read_trace(tmp_path / "t.fiat") == t
    assert read_trace(io.BytesIO(buf.getvalue())) == t


def test_deterministic_bytes_independent_of_insertion_order():
    t = small_trace()
    shuffled = dict(reversed(list(t.records.items())))
    t2 = ActivationTrace(t.layers, t.weights, t.groups, t.total_timesteps, shuffled)
    assert encode_trace(t) == encode_trace(t2)


def test_bad_magic():
    data = bytearray(encode_trace(small_trace()))
    data[0:4] = b"FIAX"
    with pytest.raises(BadMagicError, match="bad magic"):
        read_trace(bytes(data))


def test_unsupported_version():
    data = bytearray(encode_trace(small_trace()))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(UnsupportedVersionError):
        read_trace(bytes(data))


@pytest.mark.parametrize("cut", [1, 4, 17, 100])
def test_truncated(cut):
    data = encode_trace(small_trace())
    with pytest.raises(TruncatedTraceError, match="truncated"):
        read_trace(data[:-cut])


def test_trailing_bytes_rejected():
    with pytest.raises(TraceError):
        read_trace(encode_trace(small_trace()) + b"\0")


def test_duplicate_record_on_load():
    layers = [LayerSpec("a", 1, 1)]
    groups = [PromptGroup("base", GroupKind.BASE, 2)]
    data = hand_encode(layers, {"a": [[1.0]]}, groups, 1, [((0, 1, 0, 0), [[1]]), ((0, 1, 0, 0), [[2]])], {"a": 1})
    with pytest.raises(DuplicateRecordError):
        read_trace(data)


def test_duplicate_record_on_add():
    t = small_trace()
    key = next(iter(t.records))
    with pytest.raises(DuplicateRecordError):
        t.add_record(ActivationRecord(*key, t.records[key]))


def test_non_finite_on_load():
    layers = [LayerSpec("a", 1, 1)]
    groups = [PromptGroup("base", GroupKind.BASE, 2)]
    data = hand_encode(layers, {"a": [[1.0]]}, groups, 1, [((0, 1, 0, 0), [[float("nan")]])], {"a": 1})
    with pytest.raises(NonFiniteError):
        read_trace(data)


def test_base_group_with_one_prompt_rejected_on_load():
    from types import SimpleNamespace

    layers = [LayerSpec("a", 1, 1)]
    lone_base = SimpleNamespace(group_id="base", kind=GroupKind.BASE, prompt_count=1, concept_id=None)
    data = hand_encode(layers, {"a": [[1.0]]}, [lone_base], 1, [], {"a": 1})
    with pytest.raises(TraceError):
        read_trace(data)
    with pytest.raises(TraceError):
        PromptGroup("base", GroupKind.BASE, 1)


def test_invalid_trace_writes_nothing():
    t = small_trace()
    t.records[("ffn1", 1, "dog", 0)] = np.full((2, 3), np.inf, dtype=np.float32)
    buf = io.BytesIO()
    with pytest.raises(NonFiniteError):
        write_trace(t, buf)
    assert buf.getvalue() == b""


def test_shape_checks():
    with pytest.raises(ShapeMismatchError):
        ActivationTrace([LayerSpec("a", 2, 2)], {"a": np.zeros((2, 3))}, [], 1)
    with pytest.raises(ShapeMismatchError):
        ActivationTrace(
            [LayerSpec("a", 2, 1)],
            {"a": np.zeros((1, 2))},
            [PromptGroup("b", GroupKind.BASE, 2)],
            1,
            {("a", 1, "b", 0): np.zeros((3, 2)), ("a", 1, "b", 1): np.zeros((4, 2))},
        )
    with pytest.raises(ShapeMismatchError):
        LayerSpec("a", 0, 1)


def test_slice_records_order_and_guards():
    t = small_trace(prompts=5)
    recs = slice_records(t, "ffn2", 2, "dog")
    assert [r.prompt_index for r in recs] == [0, 1, 2, 3, 4]
    assert all(r.timestep == 2 and r.layer_id == "ffn2" for r in recs)
    with pytest.raises(UnknownIdentifierError):
        slice_records(t, "nope", 1, "dog")
    with pytest.raises(UnknownIdentifierError):
        slice_records(t, "ffn2", 1, "nope")
    sparse = build_trace([(LayerSpec("a", 1, 1), np.ones((1, 1)))], [PromptGroup("b", GroupKind.BASE, 2)], 4)
    assert slice_records(sparse, "a", 3, "b") == []


@given(st.permutations(list(range(2 * 3 * 2 * 4))))
def test_slice_records_independent_of_insertion_order(perm):
    t = small_trace()
    items = list(t.records.items())
    t2 = ActivationTrace(t.layers, t.weights, t.groups, t.total_timesteps, dict(items[i] for i in perm))
    for layer in ("ffn1", "ffn2"):
        for step in (1, 3):
            a = slice_records(t, layer, step, "base")
            b = slice_records(t2, layer, step, "base")
            assert [r.prompt_index for r in a] == [r.prompt_index for r in b]
            assert all(np.array_equal(x.activations, y.activations) for x, y in zip(a, b))


def test_lookup_helpers():
    t = small_trace()
    assert t.concept_group("dog").group_id == "dog"
    assert [g.group_id for g in t.base_groups()] == ["base"]
    assert t.positions("ffn1") == 2
    with pytest.raises(KeyError):
        t.layer("missing")
