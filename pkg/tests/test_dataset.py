import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from protofundus.dataset import (ClassPool, DatasetError, SplitAssignment, largest_remainder, load_manifest,
                                 select_top_k, split_stratified)

from conftest import RFMID_TOP10_COUNTS, write_manifest


def test_single_row_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("ID,path,DR,MH\nr1,img/r1.png,1,0\n")
    m = load_manifest(p)
    assert len(m.records) == 1
    assert m.records[0].id == "r1"
    assert m.records[0].labels == {"DR"}
    assert m.class_counts == {"DR": 1, "MH": 0}
    assert m.resolve(m.records[0]) == tmp_path / "img/r1.png"


def test_rfmid_top10_counts(tmp_path):
    classes = list(RFMID_TOP10_COUNTS)
    rows = []
    for c, n in RFMID_TOP10_COUNTS.items():
        rows += [(f"{c}{i}", f"x/{c}{i}.png", {c}) for i in range(n)]
    m = load_manifest(write_manifest(tmp_path / "m.csv", classes, rows))
    assert m.class_counts == RFMID_TOP10_COUNTS
    pool = select_top_k(m, 10)
    assert pool.classes == tuple(classes)


@pytest.mark.parametrize("body, needle", [
    ("ID,path,DR\nr1,a.png,2\n", "row 2"),
    ("ID,path,DR\nr1,a.png,1\nr1,b.png,0\n", "duplicate ID 'r1' at row 3"),
    ("id,file,DR\nr1,a.png,1\n", "header"),
    ("ID,path,DR\nr1,,1\n", "row 2"),
    ("ID,path,DR\nr1,a.png\n", "row 2"),
])
def test_manifest_errors(tmp_path, body, needle):
    p = tmp_path / "m.csv"
    p.write_text(body)
    with pytest.raises(DatasetError, match=needle):
        load_manifest(p)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_manifest(tmp_path / "nope.csv")


def _manifest_from_counts(tmp_path, counts):
    rows = []
    for c, n in counts.items():
        rows += [(f"{c}{i}", f"{c}{i}.png", {c}) for i in range(n)]
    return load_manifest(write_manifest(tmp_path / "m.csv", list(counts), rows))


def test_top_k_ordering(tmp_path):
    m = _manifest_from_counts(tmp_path, {"C": 1, "A": 5, "B": 3})
    assert select_top_k(m, 2).classes == ("A", "B")


def test_top_k_name_tie_break(tmp_path):
    m = _manifest_from_counts(tmp_path, {"B": 5, "A": 5})
    assert select_top_k(m, 2).classes == ("A", "B")


def test_top_k_too_many(tmp_path):
    m = _manifest_from_counts(tmp_path, {"A": 2, "B": 0})
    with pytest.raises(DatasetError):
        select_top_k(m, 2)


def test_multi_label_exclusion_matches_brute_force(tmp_path):
    classes = ["DR", "MH", "X"]
    rows = [
        ("a", "a.png", {"DR"}),
        ("b", "b.png", {"DR", "MH"}),
        ("c", "c.png", {"MH"}),
        ("d", "d.png", {"MH", "X"}),
        ("e", "e.png", {"DR", "X"}),
        ("f", "f.png", set()),
    ]
    m = load_manifest(write_manifest(tmp_path / "m.csv", classes, rows))
    pool = select_top_k(m, 2)
    assert pool.classes == ("DR", "MH")
    # brute force: keep ids with exactly one positive among the chosen classes
    expected = {c: sorted(rid for rid, _, labs in rows if labs & {"DR", "MH"} == {c}) for c in pool.classes}
    assert {c: list(v) for c, v in pool.eligible.items()} == expected
    assert "b" not in pool.eligible["DR"] and "b" not in pool.eligible["MH"]
    assert pool.excluded_multi_label == 1


def test_top_k_independent_of_row_order(tmp_path):
    rows = [(f"r{i}", f"r{i}.png", {"A"} if i % 3 else {"B", "A"} if i % 5 == 0 else {"B"}) for i in range(40)]
    m1 = load_manifest(write_manifest(tmp_path / "a.csv", ["A", "B"], rows))
    shuffled = rows[:]
    random.Random(1).shuffle(shuffled)
    m2 = load_manifest(write_manifest(tmp_path / "b.csv", ["A", "B"], shuffled))
    assert select_top_k(m1, 2) == select_top_k(m2, 2)
    assert select_top_k(m1, 2) == select_top_k(m1, 2)


def _pool(sizes):
    return ClassPool(tuple(sizes), {c: tuple(f"{c}_{i}" for i in range(n)) for c, n in sizes.items()})


def test_split_exact_fractions():
    s = split_stratified(_pool({"A": 10}), (0.7, 0.1, 0.2), seed=1)
    assert [len(s.by_class["A"][k]) for k in ("train", "val", "test")] == [7, 1, 2]


def test_split_ode_largest_remainder():
    # 58 * (0.7, 0.1, 0.2) = (40.6, 5.8, 11.6); floors 40+5+11 = 56; the two
    # spare records go to the largest remainders: val (.8) then train (.6, earlier tie)
    assert largest_remainder(58, (0.7, 0.1, 0.2)) == [41, 6, 11]
    s = split_stratified(_pool({"ODE": 58}), (0.7, 0.1, 0.2), seed=0)
    assert [len(s.by_class["ODE"][k]) for k in ("train", "val", "test")] == [41, 6, 11]


def test_split_deterministic_and_serializable():
    pool = _pool({"A": 33, "B": 12})
    a = split_stratified(pool, (0.7, 0.1, 0.2), 5)
    b = split_stratified(pool, (0.7, 0.1, 0.2), 5)
    assert a.to_json() == b.to_json()
    assert SplitAssignment.from_json(a.to_json()) == a
    assert split_stratified(pool, (0.7, 0.1, 0.2), 6).to_json() != a.to_json()


def test_split_errors():
    with pytest.raises(DatasetError):
        split_stratified(_pool({"A": 2}), (0.7, 0.1, 0.2), 0)
    with pytest.raises(DatasetError):
        split_stratified(_pool({"A": 10}), (0.7, 0.2, 0.2), 0)
    # 3 records at (0.9, 0.05, 0.05) would leave val empty
    with pytest.raises(DatasetError, match="empty split"):
        split_stratified(_pool({"A": 3}), (0.9, 0.05, 0.05), 0)


@settings(max_examples=60, deadline=None)
@given(sizes=st.lists(st.integers(10, 200), min_size=1, max_size=6), seed=st.integers(0, 2**32 - 1))
def test_split_properties(sizes, seed):
    pool = _pool({f"c{i}": n for i, n in enumerate(sizes)})
    ratios = (0.7, 0.1, 0.2)
    s = split_stratified(pool, ratios, seed)
    all_ids = list(itertools.chain.from_iterable(pool.eligible.values()))
    assert sorted(s.split) == sorted(all_ids)
    for c, n in zip(pool.classes, sizes):
        parts = s.by_class[c]
        assert sum(len(v) for v in parts.values()) == n
        for name, r in zip(("train", "val", "test"), ratios):
            assert abs(len(parts[name]) - r * n) <= 1
        seen = [rid for v in parts.values() for rid in v]
        assert len(seen) == len(set(seen))
