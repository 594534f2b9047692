import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from propmotion.core import (Demonstration, NormStats, RobotState, StateScaler, Trajectory,
                             compute_norm_stats, demonstration_from_csv, demonstration_to_csv,
                             denormalize, flatten, normalize, read_csv_table, trajectory_from_csv,
                             trajectory_to_csv, unflatten)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def random_state(rng, dim=3):
    return RobotState(*rng.normal(size=(3, dim)))


def test_flatten_layout_d1():
    s = RobotState([0.5], [0.0], [0.0])
    assert flatten(s).tolist() == [0.5, 0.0, 0.0]


def test_flatten_layout_d2():
    s = RobotState([1, 2], [3, 4], [5, 6])
    assert flatten(s).tolist() == [1, 2, 3, 4, 5, 6]


def test_flatten_roundtrip_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = random_state(rng, int(rng.integers(1, 5)))
        assert unflatten(flatten(s)) == s


@given(arrays(np.float64, st.integers(1, 6).map(lambda d: 3 * d), elements=finite))
def test_unflatten_flatten_identity(vec):
    assert np.array_equal(flatten(unflatten(vec)), vec)


def test_state_rejects_bad_input():
    with pytest.raises(ValueError):
        RobotState([1.0, np.nan], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        RobotState([1.0, 2.0], [0], [0, 0])
    with pytest.raises(ValueError):
        unflatten(np.zeros(7))


def test_state_is_read_only():
    s = RobotState([1.0], [2.0], [3.0])
    with pytest.raises(ValueError):
        s.theta[0] = 5.0


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(0.0, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Trajectory(0.01, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Trajectory(0.01, np.zeros((2, 4)))
    tr = Trajectory(0.01, [RobotState.zeros(2), RobotState([1, 1], [0, 0], [0, 0])])
    assert len(tr) == 2 and tr.dim == 2
    assert tr[1].theta.tolist() == [1, 1]


def test_demonstration_requires_matching_pair():
    a = Trajectory(0.01, np.zeros((5, 3)))
    with pytest.raises(ValueError):
        Demonstration(a, Trajectory(0.01, np.zeros((4, 3))))
    with pytest.raises(ValueError):
        Demonstration(a, Trajectory(0.02, np.zeros((5, 3))))


def test_norm_stats_constant_trajectory_floors_std():
    s = RobotState([0.3, -0.2], [0.1, 0.0], [1.0, 2.0])
    stats = compute_norm_stats([Trajectory(0.01, [s] * 10)])
    assert np.allclose(stats.mean, flatten(s), rtol=0, atol=1e-15)
    assert np.all(stats.std == 1e-6)


def test_norm_stats_two_samples_hand_values():
    stats = compute_norm_stats([np.array([[0.0], [2.0]])])
    assert stats.mean.tolist() == [1.0] and stats.std.tolist() == [1.0]


def test_norm_stats_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    trajs = [Trajectory(0.01, rng.normal(size=(int(rng.integers(5, 40)), 9)) * 3 + 1) for _ in range(4)]
    rows = [r for t in trajs for r in t.data]
    n = len(rows)
    mean = [sum(r[j] for r in rows) / n for j in range(9)]
    std = [(sum((r[j] - mean[j]) ** 2 for r in rows) / n) ** 0.5 for j in range(9)]
    stats = compute_norm_stats(trajs)
    assert np.max(np.abs(stats.mean - mean)) < 1e-12
    assert np.max(np.abs(stats.std - std)) < 1e-12


def test_norm_stats_empty_is_error():
    with pytest.raises(ValueError, match="no data"):
        compute_norm_stats([])


def test_norm_stats_demonstration_uses_both_robots():
    lead = Trajectory(0.01, np.zeros((4, 3)))
    foll = Trajectory(0.01, np.full((4, 3), 2.0))
    stats = compute_norm_stats([Demonstration(lead, foll)])
    assert np.allclose(stats.mean, 1.0) and np.allclose(stats.std, 1.0)


def test_normalize_special_points():
    stats = NormStats(np.array([1.0, -2.0, 0.5]), np.array([2.0, 0.5, 3.0]))
    assert np.array_equal(normalize(stats.mean, stats), np.zeros(3))
    assert np.allclose(normalize(stats.mean + stats.std, stats), np.ones(3), atol=1e-15)
    with pytest.raises(ValueError):
        normalize(np.zeros(4), stats)


def test_normalize_roundtrip_random():
    rng = np.random.default_rng(2)
    stats = NormStats(rng.normal(size=9), rng.uniform(1e-3, 5, size=9))
    for _ in range(100):
        v = rng.normal(size=9) * 10
        assert np.max(np.abs(denormalize(normalize(v, stats), stats) - v)) < 1e-9
        assert np.max(np.abs(normalize(denormalize(v, stats), stats) - v)) < 1e-9


@settings(max_examples=50)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=st.floats(1e-3, 1e3)))
def test_normalize_roundtrip_property(v, std):
    stats = NormStats(np.linspace(-1, 1, 6), std)
    assert np.allclose(denormalize(normalize(v, stats), stats), v, rtol=0, atol=1e-9)


def test_norm_stats_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        NormStats(np.zeros(2), np.array([1.0, 0.0]))


def test_state_scaler_estimator_api():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 6)) * 4 + 2
    sc = StateScaler().fit(X)
    Z = sc.transform(X)
    assert np.allclose(Z.mean(0), 0, atol=1e-12) and np.allclose(Z.std(0), 1, atol=1e-12)
    assert np.allclose(sc.inverse_transform(Z), X, atol=1e-12)
    assert sc.get_params() == {"std_floor": 1e-6}
    assert np.array_equal(StateScaler.from_stats(sc.stats_).transform(X), Z)


def test_trajectory_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    tr = Trajectory(0.01, rng.normal(size=(12, 9)))
    p = tmp_path / "tr.csv"
    trajectory_to_csv(tr, p, {"seed": 3, "config_hash": "abc"})
    back = trajectory_from_csv(p)
    assert back == tr
    header, _, meta = read_csv_table(p)
    assert header[:4] == ["t", "theta_0", "theta_1", "theta_2"]
    assert meta == {"seed": "3", "config_hash": "abc"}


def test_demonstration_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    demo = Demonstration(Trajectory(0.01, rng.normal(size=(8, 9))),
                         Trajectory(0.01, rng.normal(size=(8, 9))), "d")
    p = tmp_path / "d.csv"
    demonstration_to_csv(demo, p)
    back = demonstration_from_csv(p)
    assert back.leader == demo.leader and back.follower == demo.follower
    assert back.name == "d"
