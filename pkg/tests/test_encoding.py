import numpy as np
import pytest

from qkrl.encoding import FixedPointGrid, RegisterLayout, decode, encode
from qkrl.errors import ConfigError, RangeError


@pytest.fixture
def layout():
    return RegisterLayout(state_dims=2, action_dims=1, bits_per_dim=2, state_range=(0.0, 3.0), action_range=(0.0, 3.0))


def test_qubit_counts(layout):
    assert layout.n_state_qubits == 4
    assert layout.n_action_qubits == 2
    assert layout.n_states == 16


def test_encode_extremes(layout):
    assert encode([0, 0], layout) == 0
    assert encode([3, 3], layout) == 15


def test_encode_nearest_grid_point():
    lay = RegisterLayout(1, 1, 2, state_range=(0.0, 3.0))
    grid_values = lay.states.points()[:, 0]
    brute = int(np.argmin(np.abs(grid_values - 1.6)))
    assert brute == 2
    assert encode([1.6], lay) == 2


def test_ties_round_up():
    lay = RegisterLayout(1, 1, 2, state_range=(0.0, 3.0))
    assert encode([0.5], lay) == 1
    assert encode([2.5], lay) == 3


def test_out_of_range(layout):
    with pytest.raises(RangeError):
        encode([3.5, 0], layout)
    with pytest.raises(RangeError):
        encode([0.0], layout)
    with pytest.raises(RangeError):
        decode(16, layout)
    with pytest.raises(RangeError):
        decode(-1, layout)


def test_decode_extremes(layout):
    np.testing.assert_array_equal(decode(0, layout), [0.0, 0.0])
    np.testing.assert_array_equal(decode(15, layout), [3.0, 3.0])


def test_round_trip_indices(layout):
    for i in range(layout.n_states):
        assert encode(decode(i, layout), layout) == i


def test_round_trip_random_vectors(layout):
    rng = np.random.default_rng(0)
    pts = layout.states.points()
    for v in rng.uniform(0, 3, size=(100, 2)):
        nearest = pts[np.argmin(np.abs(pts - v).max(axis=1))]
        np.testing.assert_allclose(decode(encode(v, layout), layout), nearest)


def test_monotone_per_dimension():
    grid = FixedPointGrid.build(1, 3, (-1.0, 2.0))
    idx = [grid.encode([x]) for x in grid.points()[:, 0]]
    assert idx == sorted(idx)


def test_distinct_indices_are_separated(layout):
    pts = layout.states.points()
    eps = layout.states.precision.min()
    d = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
    off = ~np.eye(len(pts), dtype=bool)
    assert d[off].min() >= eps


def test_precision_positive(layout):
    assert np.all(layout.states.precision > 0)
    np.testing.assert_allclose(layout.states.precision, 0.75)


def test_layout_dict_round_trip(layout):
    assert RegisterLayout.from_dict(layout.to_dict()) == layout


def test_bad_layout():
    with pytest.raises(ConfigError):
        RegisterLayout(1, 1, 0)
    with pytest.raises(ConfigError):
        RegisterLayout.from_dict({"state_dims": 1})


def test_reward_register_range(layout):
    assert layout.rewards.n_qubits == 4
    np.testing.assert_allclose(layout.rewards.hi, [1.0])
