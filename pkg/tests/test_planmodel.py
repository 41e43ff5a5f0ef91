import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmapp.planmodel import (
    PeriodicPlan,
    Trajectory,
    collision_pairs,
    load_plan,
    pair_distance,
    plan_from_dict,
    plan_to_dict,
    position_at,
    residue,
    save_plan,
    validate_plan,
)

from conftest import corridor, open_square, random_plan, straight_plan
from oracles import brute_collision_pairs, sampled_min_clearance, sampled_min_distance


def test_position_at_examples():
    tr = Trajectory(0, 0, np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), 1.0)
    assert np.allclose(position_at(tr, 0.0), [0, 0])
    assert np.allclose(position_at(tr, 2.0), [2, 0])
    assert np.allclose(position_at(tr, 1.5), [1.5, 0])
    with pytest.raises(ValueError):
        position_at(tr, 2.5)


def test_residue_examples():
    assert residue(5.0, 2.0) == pytest.approx(1.0)
    assert residue(-0.5, 2.0) == pytest.approx(1.5)
    assert residue(7.2, 3.0) == pytest.approx(1.2)
    assert residue(-5e-324, 2.0) == 0.0


@settings(max_examples=200)
@given(st.floats(-1e4, 1e4), st.floats(1e-3, 1e3))
def test_residue_range_and_periodicity(t, q):
    r = residue(t, q)
    assert 0 <= r < q
    r2 = residue(t + q, q)
    # equal up to rounding, where q - tiny and 0 are the same residue
    assert min(abs(r - r2), q - abs(r - r2)) <= 1e-9 * max(1.0, abs(t) + q)


def test_plan_rejects_bad_shapes():
    env = corridor()
    with pytest.raises(ValueError):
        PeriodicPlan(env, 1, 1.0, 0.5, 1.0, np.zeros((1, 1, 3, 2)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        PeriodicPlan(env, 1, -1.0, 0.5, 1.0, np.zeros((1, 1, 3, 2)), np.ones((1, 1)))


def test_collision_pairs_hand_example():
    env = open_square(endpoints=[((-5.0, 0.0), (5.0, 0.0)), ((0.0, -5.0), (0.0, 5.0))])
    plan = straight_plan(env, M=1, K=2, tau=4.0)
    plan = plan.replace(dt=np.full((2, 1), 2.0))
    C = collision_pairs(plan)
    assert C.tuples() == {(0, 0, 0, 1, 0, 0), (0, 0, 1, 1, 0, 1), (1, 0, 0, 0, 0, 0), (1, 0, 1, 0, 0, 1)}
    assert np.all(C.alpha == 0)


def test_collision_pairs_single_segment_meets_own_copies():
    env = corridor()
    plan = straight_plan(env, M=1, K=1, tau=9.0)  # tau equals the duration
    C = collision_pairs(plan)
    assert C.tuples() == brute_collision_pairs(plan.tau, plan.dt, 1, 1)


def test_collision_pairs_with_huge_period_match_same_index():
    env = open_square(endpoints=[((-5.0, 0.0), (5.0, 0.0)), ((0.0, -5.0), (0.0, 5.0))])
    plan = straight_plan(env, M=1, K=4, tau=1e6)
    C = collision_pairs(plan)
    assert C.tuples() == {(n, 0, k, 1 - n, 0, k) for n in range(2) for k in range(4)}
    assert np.all(C.alpha == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_collision_pairs_match_brute_force(seed):
    plan = random_plan(np.random.default_rng(seed))
    got = collision_pairs(plan)
    assert got.tuples() == brute_collision_pairs(plan.tau, plan.dt, plan.M, plan.K)
    assert np.all((got.alpha >= 0) & (got.alpha < 1))


def test_pair_distance_examples():
    env = open_square(endpoints=[((-1.0, 0.0), (5.0, 0.0)), ((0.0, -5.0), (0.0, 5.0))])
    pts = np.zeros((2, 1, 3, 2))
    pts[0, 0] = [[0, 0], [0, 1], [0, 2]]
    pts[1, 0] = [[1, 0], [3, 0], [5, 0]]
    plan = PeriodicPlan(env, 1, 10.0, 0.5, 1.0, pts, np.array([[1.0], [2.0]]))
    # k=1 of stream 0 sits at t=1, half way through segment 0 of stream 1
    d, a = pair_distance(plan, (0, 0, 1, 1, 0, 0))
    assert a == pytest.approx(0.5)
    assert d == pytest.approx(math.dist((0, 1), (2, 0)))
    pts[0, 0, 1] = [0, 0]
    plan = plan.replace(points=pts)
    d, a = pair_distance(plan, (0, 0, 1, 1, 0, 0))
    assert d == pytest.approx(2.0)


def test_pair_distance_coincident_and_touching():
    env = open_square(endpoints=[((-5.0, 0.0), (5.0, 0.0)), ((-5.0, 1.0), (5.0, 1.0))])
    plan = straight_plan(env, K=4, tau=50.0)
    d, a = pair_distance(plan, (0, 0, 2, 1, 0, 2))
    assert a == 0 and d == pytest.approx(1.0)  # exactly 2r
    d, _ = pair_distance(plan.replace(points=np.repeat(plan.points[:1], 2, axis=0)), (0, 0, 2, 1, 0, 2))
    assert d == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pair_distance_is_distance_of_interpolated_positions(seed):
    plan = random_plan(np.random.default_rng(seed))
    C = collision_pairs(plan)
    for tup, wrap in list(zip(C.idx, C.wrap))[:30]:
        n, m, k, n2, m2, k2 = map(int, tup)
        d, a = pair_distance(plan, tup)
        t = k * plan.dt[n, m]
        t2 = (k2 + a) * plan.dt[n2, m2]
        p = position_at(plan.trajectory(n, m), t)
        q = position_at(plan.trajectory(n2, m2), t2)
        assert d == pytest.approx(float(np.linalg.norm(p - q)), abs=1e-9)


def test_validate_parallel_lanes_ok():
    env = open_square(endpoints=[((-5.0, 0.0), (5.0, 0.0)), ((-5.0, 1.2), (5.0, 1.2))])
    assert validate_plan(straight_plan(env, K=8, tau=1.5)).ok


def test_validate_single_stream_spacing():
    env = corridor(5.0, 3.0, endpoints=(((0.5, 1.5), (4.5, 1.5)),))
    ok = validate_plan(straight_plan(env, K=8, tau=1.5))
    assert ok.ok and ok.margins["collision"] == pytest.approx(0.5)
    bad = validate_plan(straight_plan(env, K=8, tau=0.9))
    assert not bad.ok
    assert {v.kind for v in bad.violations} == {"collision"}
    assert bad.margins["collision"] == pytest.approx(-0.1)


def test_validate_reports_each_kind():
    env = corridor(5.0, 3.0, endpoints=(((0.5, 1.5), (4.5, 1.5)),))
    plan = straight_plan(env, K=8, tau=3.0, speed=2.0)
    assert {v.kind for v in validate_plan(plan).violations} == {"velocity"}
    pts = plan.points.copy()
    pts[0, 0, 4] = [2.5, 0.2]
    kinds = {v.kind for v in validate_plan(plan.replace(points=pts, dt=plan.dt * 8, tau=50.0)).violations}
    assert kinds == {"clearance"}
    pts = plan.points.copy()
    pts[0, 0, 0] = [1.0, 1.5]
    kinds = {v.kind for v in validate_plan(plan.replace(points=pts, dt=plan.dt * 2)).violations}
    assert kinds == {"endpoint"}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_validator_agrees_with_dense_sampling(seed):
    rng = np.random.default_rng(seed)
    plan = random_plan(rng, K=int(rng.integers(1, 5)), M=int(rng.integers(1, 3)), N=int(rng.integers(1, 3)))
    report = validate_plan(plan)
    sampled = sampled_min_distance(plan, 1e-3 * plan.tau)
    exact = report.margins["collision"] + 2 * plan.r
    # the exact minimum can only be lower than any sampled value
    assert exact <= sampled + 1e-9
    if abs(sampled - 2 * plan.r) >= 1e-3:
        assert (sampled >= 2 * plan.r) == (exact >= 2 * plan.r - 1e-6)
    clear = sampled_min_clearance(plan)
    assert report.margins["clearance"] + plan.r <= clear + 1e-9
    assert clear - (report.margins["clearance"] + plan.r) < 1e-3


def test_plan_round_trip(tmp_path):
    plan = random_plan(np.random.default_rng(3), N=3, M=2, K=6)
    plan = plan.replace(meta={"note": "x"})
    p = tmp_path / "plan.json"
    save_plan(plan, p)
    back = load_plan(p)
    assert np.max(np.abs(back.points - plan.points)) <= 1e-12
    assert np.max(np.abs(back.dt - plan.dt)) <= 1e-12
    assert abs(back.tau - plan.tau) <= 1e-12
    assert (back.M, back.N, back.K, back.r, back.v_max) == (plan.M, plan.N, plan.K, plan.r, plan.v_max)
    assert back.env == plan.env and back.meta == plan.meta
    assert json.loads(p.read_text())["version"] == 1


def test_plan_file_with_named_env():
    from pmapp.geometry import builtin_environment
    from pmapp.seedplan import initial_plan

    plan, _ = initial_plan(builtin_environment("a"), 1, K=4)
    d = plan_to_dict(plan)
    d["env"] = "a"
    back = plan_from_dict(d)
    assert back.env == plan.env


def test_truncated_plan_file_raises(tmp_path):
    plan = random_plan(np.random.default_rng(0))
    p = tmp_path / "plan.json"
    save_plan(plan, p)
    p.write_text(p.read_text()[:100])
    with pytest.raises(ValueError):
        load_plan(p)
