import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpl_lab.params import ParameterStore, UnknownParamError, register_model, take_snapshot


def store_with(*ids, shape=(2,)):
    s = ParameterStore()
    for i, pid in enumerate(ids):
        s.add(pid, np.full(shape, float(i)))
    return s


def test_shared_and_private_sets():
    s = store_with("w1", "w2", "w3")
    register_model(s, "A", ["w1", "w2"])
    register_model(s, "B", ["w1", "w2", "w3"])
    assert s.shared("A", "B") == {"w1", "w2"}
    assert s.private("B") == {"w3"}
    assert s.private("A") == set()


def test_disjoint_models_share_nothing():
    s = store_with("a", "b")
    s.register_model("A", ["a"])
    s.register_model("B", ["b"])
    assert s.shared("A", "B") == frozenset()


def test_register_errors():
    s = store_with("a")
    with pytest.raises(UnknownParamError):
        s.register_model("A", ["a", "zz"])
    s.register_model("A", ["a"])
    with pytest.raises(ValueError):
        s.register_model("A", ["a"])
    with pytest.raises(ValueError):
        s.register_model("E", [])


def test_growing_shared_prefixes_are_nested():
    layers = [f"A.layer{i}.W" for i in range(4)] + [f"B.layer{i}.W" for i in range(6)]
    s = store_with(*layers)
    s.register_model("A", layers[:4])
    prev = frozenset()
    for k in range(1, 5):
        s.register_model(f"B{k}", layers[:k] + layers[4 + k :])
        cur = s.shared("A", f"B{k}")
        assert prev < cur and len(cur) == k
        prev = cur


def test_snapshot_is_frozen_copy():
    s = store_with("a")
    snap = take_snapshot(s, ["a"], model_id="A", epoch=3)
    s["a"] = np.array([9.0, 9.0])
    np.testing.assert_array_equal(snap["a"], [0.0, 0.0])
    with pytest.raises(ValueError):
        snap["a"][0] = 1.0
    assert snap.model_id == "A" and snap.epoch == 3


def test_snapshot_bit_exact_and_differs_only_when_changed():
    rng = np.random.default_rng(0)
    s = ParameterStore()
    s.add("a", rng.normal(size=(3, 3)))
    s.add("b", rng.normal(size=3))
    first = s.snapshot()
    assert first["a"].tobytes() == s["a"].tobytes()
    s["b"] = s["b"] + 1e-12
    second = s.snapshot()
    assert first.differs_from(second) == {"b"}


def test_snapshot_unknown_id():
    with pytest.raises(UnknownParamError):
        store_with("a").snapshot(["nope"])


def test_setitem_checks_shape():
    s = store_with("a")
    with pytest.raises(ValueError):
        s["a"] = np.zeros(3)


def test_restore():
    s = store_with("a")
    snap = s.snapshot()
    s["a"] = np.ones(2)
    s.restore(snap)
    np.testing.assert_array_equal(s["a"], [0.0, 0.0])
    s["a"] = np.ones(2)  # restored value must be writable/independent
    np.testing.assert_array_equal(snap["a"], [0.0, 0.0])


def test_binary_layout(tmp_path):
    s = ParameterStore()
    s.add("w", np.array([[1.0, 2.0, 3.0]]))
    path = tmp_path / "p.bin"
    s.save(path)
    raw = path.read_bytes()
    expected = b"WPLSTORE" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2)
    expected += struct.pack("<2Q", 1, 3) + struct.pack("<3d", 1.0, 2.0, 3.0)
    assert raw == expected


def test_load_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTSTORE" + b"\0" * 8)
    with pytest.raises(ValueError):
        ParameterStore.load(p)
    s = store_with("a")
    s.save(p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        ParameterStore.load(p)


shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), shapes, min_size=1, max_size=5), st.integers(0, 2**31))
def test_save_load_roundtrip_bit_exact(tmp_path_factory, spec, seed):
    rng = np.random.default_rng(seed)
    s = ParameterStore()
    for pid, shape in spec.items():
        s.add(pid, rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300))
    path = tmp_path_factory.mktemp("rt") / "s.bin"
    s.save(path)
    back = ParameterStore.load(path)
    assert back.ids() == s.ids()
    for pid in s:
        assert back[pid].shape == s[pid].shape
        assert back[pid].tobytes() == s[pid].tobytes()
    back.save(path.with_suffix(".again"))
    assert path.read_bytes() == path.with_suffix(".again").read_bytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sets(st.sampled_from("abcdefg"), min_size=1), min_size=2, max_size=4))
def test_partition_properties(memberships):
    s = store_with(*"abcdefg")
    for i, m in enumerate(memberships):
        s.register_model(f"M{i}", m)
    names = s.models()
    for x in names:
        for y in names:
            if x != y:
                assert s.shared(x, y) == s.shared(y, x)
                assert s.private(x, y) | s.shared(x, y) == s.members(x)
                assert not (s.private(x, y) & s.shared(x, y))
        shared_any = frozenset().union(*(s.shared(x, y) for y in names if y != x))
        assert s.private(x) | shared_any == s.members(x)
        assert not (s.private(x) & shared_any)
