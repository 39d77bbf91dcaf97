import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevpr.errors import DataError
from bevpr.retrieval import (
    EmptyDatabaseError,
    PlaceDatabase,
    PlaceRecord,
    angular_error,
    build_database,
    dedup_trajectory,
    recall_at_n,
    recall_vs_criterion,
    yaw_error_quartiles,
)
from bevpr.spectral import PlaceFeature


def feat(vec):
    v = np.zeros(256)
    v[: len(vec)] = vec
    return PlaceFeature(v)


def random_db(rng, n, dup_every=0):
    vals = rng.uniform(0, 1, size=(n, 256)).astype(np.float32)
    if dup_every:
        vals[dup_every::dup_every] = vals[0]
    ids = rng.permutation(10 * n)[:n]
    poses = rng.uniform(-100, 100, size=(n, 3))
    return [PlaceRecord(int(i), tuple(p), PlaceFeature(v)) for i, p, v in zip(ids, poses, vals)]


def brute_force(records, q, n):
    ids = np.array([r.id for r in records])
    d = np.array([np.sqrt(np.sum((r.feature.vector - q) ** 2)) for r in records])
    order = sorted(range(len(records)), key=lambda i: (d[i], ids[i]))[:n]
    return [(int(ids[i]), float(d[i])) for i in order]


def test_empty_database_queries_fail_cleanly():
    db = build_database([])
    assert len(db) == 0
    with pytest.raises(EmptyDatabaseError):
        db.query_top_n(feat([1.0]), 1)
    with pytest.raises(EmptyDatabaseError):
        recall_at_n(db, [PlaceRecord(0, (0, 0, 0), feat([1.0]))])


def test_duplicate_id_rejected():
    r = PlaceRecord(3, (0, 0, 0), feat([1.0]))
    with pytest.raises(ValueError, match="duplicate place id 3"):
        build_database([r, PlaceRecord(3, (1, 0, 0), feat([2.0]))])


def test_brute_force_oracle_1000_records():
    rng = np.random.default_rng(0)
    recs = random_db(rng, 1000)
    db = build_database(recs)
    for _ in range(30):
        q = rng.uniform(0, 1, 256).astype(np.float32).astype(np.float64)
        got = db.query_top_n(q, 10)
        want = brute_force(recs, q, 10)
        assert [i for i, _ in got] == [i for i, _ in want]
        np.testing.assert_allclose([d for _, d in got], [d for _, d in want], rtol=1e-12)


def test_ties_break_by_smaller_id():
    rng = np.random.default_rng(1)
    recs = random_db(rng, 200, dup_every=7)
    db = build_database(recs)
    q = recs[0].feature.vector
    got = db.query_top_n(q, 40)
    assert got == brute_force(recs, q, 40)
    tied = [i for i, d in got if d == 0.0]
    assert len(tied) == len(range(0, 200, 7))
    assert tied == sorted(tied)


def test_exact_match_first_and_saturation():
    rng = np.random.default_rng(2)
    recs = random_db(rng, 12)
    db = build_database(recs)
    got = db.query_top_n(recs[5].feature, 1)
    assert got == [(recs[5].id, 0.0)]
    every = db.query_top_n(recs[5].feature, 50)
    assert len(every) == 12
    assert sorted(i for i, _ in every) == sorted(r.id for r in recs)
    assert all(a[1] <= b[1] for a, b in zip(every, every[1:]))
    with pytest.raises(ValueError):
        db.query_top_n(recs[0].feature, 0)


def test_save_load_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    db = build_database(random_db(rng, 40))
    p = tmp_path / "places.bevdb"
    db.save(str(p))
    back = PlaceDatabase.load(str(p))
    np.testing.assert_array_equal(back.matrix, db.matrix)
    np.testing.assert_array_equal(back.ids, db.ids)
    np.testing.assert_array_equal(back.poses, db.poses)
    q = rng.uniform(0, 1, 256)
    assert back.query_top_n(q, 7) == db.query_top_n(q, 7)
    p2 = tmp_path / "again.bevdb"
    back.save(str(p2))
    assert p.read_bytes() == p2.read_bytes()


def test_load_rejects_corrupt_files(tmp_path):
    db = build_database(random_db(np.random.default_rng(4), 3))
    p = tmp_path / "x.bevdb"
    db.save(str(p))
    raw = p.read_bytes()
    (tmp_path / "magic.bevdb").write_bytes(b"NOPE!" + raw[5:])
    (tmp_path / "short.bevdb").write_bytes(raw[:-3])
    for name in ("magic.bevdb", "short.bevdb"):
        with pytest.raises(DataError):
            PlaceDatabase.load(str(tmp_path / name))


def line(xs):
    return [PlaceRecord(i, (x, 0.0, 0.0), feat([1.0])) for i, x in enumerate(xs)]


def test_dedup_hand_example():
    kept = dedup_trajectory(line([0.0, 0.1, 0.25, 0.30, 0.55]))
    assert [r.pose[0] for r in kept] == [0.0, 0.25, 0.55]


def test_dedup_stationary_and_exact_spacing():
    assert len(dedup_trajectory(line([1.0] * 6))) == 1
    xs = [0.2 * i for i in range(20)]
    assert len(dedup_trajectory(line(xs))) == 20
    assert dedup_trajectory([]) == []


@settings(max_examples=50, deadline=None)
@given(steps=st.lists(st.floats(0.0, 0.5), min_size=1, max_size=40))
def test_dedup_spacing_invariant(steps):
    kept = dedup_trajectory(line(np.cumsum([0.0] + steps)))
    xs = [r.pose[0] for r in kept]
    assert xs[0] == 0.0
    assert all(b - a >= 0.2 - 1e-9 for a, b in zip(xs, xs[1:]))


def hand_recall_case():
    db = build_database([
        PlaceRecord(0, (0.0, 0.0, 0.0), feat([1.0])),
        PlaceRecord(1, (10.0, 0.0, 0.0), feat([2.0])),
        PlaceRecord(2, (20.0, 0.0, 0.0), feat([3.0])),
    ])
    queries = [
        PlaceRecord(10, (0.5, 0.0, 0.0), feat([1.1])),   # top-1 is place 0, 0.5 m away
        PlaceRecord(11, (20.0, 0.0, 0.0), feat([2.1])),  # top-1 is place 1 (10 m off), top-2 place 2
        PlaceRecord(12, (50.0, 0.0, 0.0), feat([0.0])),  # nothing within 2 m
    ]
    return db, queries


def test_recall_hand_case():
    db, queries = hand_recall_case()
    rep = recall_at_n(db, queries, n_max=3, d=2.0)
    assert rep.recall[1] == pytest.approx(1 / 3)
    assert rep.recall[2] == pytest.approx(2 / 3)
    assert rep.recall[3] == pytest.approx(2 / 3)
    assert rep.retrievals[1][1] == [1, 2, 0]
    curve = dict(recall_vs_criterion(db, queries, 1, [2, 10, 30, 60]))
    assert curve == {2.0: pytest.approx(1 / 3), 10.0: pytest.approx(2 / 3), 30.0: pytest.approx(2 / 3), 60.0: 1.0}


def test_self_retrieval_and_zero_criterion():
    recs = random_db(np.random.default_rng(5), 30)
    db = build_database(recs)
    assert recall_at_n(db, recs, 5, 2.0).recall[1] == 1.0
    assert recall_vs_criterion(db, recs, 1, [0.0])[0][1] == 1.0


def test_recall_monotone_in_n_and_d():
    rng = np.random.default_rng(6)
    for _ in range(5):
        recs = random_db(rng, 80)
        db = build_database(recs)
        qs = [PlaceRecord(1000 + k, tuple(r.pose[i] + rng.normal(0, 5) for i in range(3)),
                          PlaceFeature(np.clip(r.feature.vector + rng.normal(0, 0.3, 256), 0, None)))
              for k, r in enumerate(recs[:30])]
        rec = recall_at_n(db, qs, 25, 4.0).recall
        vals = [rec[n] for n in range(1, 26)]
        assert all(0 <= v <= 1 for v in vals)
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        curve = recall_vs_criterion(db, qs, 1)
        assert [d for d, _ in curve] == list(range(2, 21))
        assert all(a[1] <= b[1] for a, b in zip(curve, curve[1:]))


def test_yaw_quartiles():
    assert yaw_error_quartiles([(10.0, 10.0)] * 3) == (0.0, 0.0, 0.0)
    # linear interpolation over {1, 2, 3, 4}: positions 0.75, 1.5, 2.25
    q = yaw_error_quartiles([(e, 0.0) for e in (1.0, 2.0, 3.0, 4.0)])
    assert q == pytest.approx((1.75, 2.5, 3.25))
    assert angular_error(359.0, 1.0) == pytest.approx(2.0)
    assert angular_error(180.0, 0.0) == pytest.approx(180.0)
    with pytest.raises(ValueError):
        yaw_error_quartiles([])
