import numpy as np
import pytest

from infex.envs import (
    FLAG_TERMINAL,
    Dataset,
    generate_records,
    goal_grid,
    initial_stack,
    record_dtype,
    render_goal_grid,
    uniform_policy,
)
from infex.errors import ConfigurationError, InputValidationError
from infex.numerics import OptimConfig, float64_params, grad_check
from infex.prediction import (
    PredictionNet,
    RolloutConfig,
    compose_state,
    eval_multistep_mse,
    predict_frame,
    quantize,
    rollout,
    rollout_all_actions,
    to_float,
    train_prediction,
    trajectory_starts,
)

SPEC = goal_grid(grid=6, cell=2, max_steps=20)
NET_SPEC = goal_grid(grid=9, cell=2, max_steps=20)


def small_net(seed=0, **kw):
    return PredictionNet(4, 18, 18, 4, hidden=16, joint=16, rng=np.random.default_rng(seed), **kw)


def zero_decoder(net):
    for _, p in net.decoder.params():
        p.value[...] = 0


class GridOracle:
    """Exact simulator of goal-grid dynamics read off the last frame of a stack."""

    def __init__(self, spec):
        self.spec = spec
        self.n_actions = spec.n_actions

    def predict(self, stacks, actions):
        spec, out = self.spec, []
        for stack, a in zip(np.asarray(stacks), actions):
            rows, cols = np.nonzero(stack[-1] == 255)
            r, c = rows[0] // spec.cell, cols[0] // spec.cell
            dr, dc = [(-1, 0), (1, 0), (0, -1), (0, 1)][int(a)]
            nr, nc = r + dr, c + dc
            if 0 <= nr < spec.grid and 0 <= nc < spec.grid:
                r, c = nr, nc
            out.append(render_goal_grid(spec, (r, c)) / 255.0)
        return np.asarray(out, dtype=np.float32)


class Echo:
    n_actions = 4

    def predict(self, stacks, actions):
        return to_float(np.asarray(stacks)[:, -1])


def test_zero_decoder_outputs_half():
    net = small_net()
    zero_decoder(net)
    state = np.random.default_rng(0).integers(0, 256, size=(4, 18, 18), dtype=np.uint8)
    np.testing.assert_array_equal(predict_frame(net, state, 2), np.full((18, 18), 0.5, np.float32))


def test_prediction_in_open_interval_and_deterministic():
    net = small_net(3)
    states = np.random.default_rng(1).integers(0, 256, size=(5, 4, 18, 18), dtype=np.uint8)
    a = net.forward(states, [0, 1, 2, 3, 0])
    assert np.all((a > 0) & (a < 1)) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, net.forward(states, [0, 1, 2, 3, 0]))


def test_predict_frame_rejects_bad_action():
    net = small_net()
    with pytest.raises(InputValidationError):
        predict_frame(net, np.zeros((4, 18, 18), np.uint8), 4)


def test_wrong_state_shape_rejected():
    with pytest.raises(ConfigurationError):
        small_net().forward(np.zeros((1, 3, 18, 18), np.uint8), [0])


def test_compose_drops_oldest():
    frames = [np.full((3, 3), i, np.uint8) for i in range(1, 6)]
    out = compose_state(np.stack(frames[:4]), frames[4])
    np.testing.assert_array_equal(out, np.stack(frames[1:]))


def test_compose_r_times_replaces_stack():
    state = np.zeros((4, 3, 3), np.uint8)
    new = [np.full((3, 3), 10 * i, np.uint8) for i in range(1, 5)]
    for f in new:
        state = compose_state(state, f)
    np.testing.assert_array_equal(state, np.stack(new))


def test_quantize_round_trip():
    q = quantize(np.full((2, 2), 0.5))
    assert q.dtype == np.uint8 and np.all(q == 128)
    np.testing.assert_allclose(to_float(q), 128 / 255)
    state = compose_state(np.zeros((2, 2, 2), np.uint8), np.full((2, 2), 0.5, np.float32))
    assert np.all(state[-1] == 128)


def test_rollout_horizon_zero_is_empty():
    assert rollout(small_net(), np.zeros((4, 18, 18), np.uint8), 0, RolloutConfig(0)) == []


def test_rollout_config_rejects_negative():
    with pytest.raises(ConfigurationError):
        RolloutConfig(-1)


def test_echo_stub_is_fixed_point():
    state = np.random.default_rng(0).integers(0, 256, size=(4, 5, 5), dtype=np.uint8)
    frames = rollout(Echo(), state, 1, RolloutConfig(3))
    assert len(frames) == 3
    for f in frames:
        np.testing.assert_array_equal(f, state[-1])


def test_rollout_first_frame_matches_quantized_prediction():
    net = small_net(2)
    state = np.random.default_rng(2).integers(0, 256, size=(4, 18, 18), dtype=np.uint8)
    first = rollout(net, state, 1, RolloutConfig(1))[0]
    np.testing.assert_array_equal(first, quantize(predict_frame(net, state, 1)))


def test_rollout_all_actions_matches_single_rollouts():
    net = small_net(4)
    state = np.random.default_rng(4).integers(0, 256, size=(4, 18, 18), dtype=np.uint8)
    every = rollout_all_actions(net, state, 3)
    assert every.shape == (4, 3, 18, 18)
    for a in range(4):
        np.testing.assert_array_equal(every[a], np.stack(rollout(net, state, a, RolloutConfig(3))))


def test_oracle_rollout_follows_dynamics():
    oracle = GridOracle(SPEC)
    state = initial_stack(render_goal_grid(SPEC, (0, 0)), 4)
    frames = rollout(oracle, state, 3, RolloutConfig(3))
    for i, f in enumerate(frames, start=1):
        np.testing.assert_array_equal(f, render_goal_grid(SPEC, (0, i)))


def grid_dataset(n, seed=0, spec=SPEC):
    return Dataset(spec.frames, spec.height, spec.width, spec.n_actions,
                   generate_records(spec, uniform_policy(spec.n_actions), n, 0.3, seed))


def test_perfect_oracle_has_zero_multistep_error():
    ds = grid_dataset(400)
    rows, skipped = eval_multistep_mse(GridOracle(SPEC), ds, [1, 3, 5, 10])
    assert [r[0] for r in rows] == [1, 3, 5, 10]
    assert all(r[1] == 0.0 for r in rows)
    assert rows[0][2] > 0 and rows[0][2] + skipped == len(ds)


def test_eval_table_has_one_row_per_horizon():
    ds = grid_dataset(200, spec=NET_SPEC)
    for hs in ([1], [1, 2], [1, 3, 5, 10]):
        rows, _ = eval_multistep_mse(small_net(), ds, hs)
        assert len(rows) == len(hs)


def test_eval_rejects_unsorted_horizons():
    with pytest.raises(InputValidationError):
        eval_multistep_mse(small_net(), grid_dataset(50, spec=NET_SPEC), [3, 1])


def test_trajectory_starts_respect_episode_ends():
    arr = np.zeros(6, dtype=record_dtype(1, 2, 2))
    arr["flags"][2] = FLAG_TERMINAL
    ds = Dataset(1, 2, 2, 4, arr)
    starts, skipped = trajectory_starts(ds, 2)
    # a window may end on a terminal record but not run past one
    assert list(starts) == [0, 1, 3, 4] and skipped == 2


def test_constant_frame_dataset_is_learned():
    frame = render_goal_grid(goal_grid(grid=9, cell=2), (2, 3))
    arr = np.zeros(2000, dtype=record_dtype(4, 18, 18))
    arr["state"] = frame
    arr["next_frame"] = frame
    arr["action"] = np.arange(2000) % 4
    ds = Dataset(4, 18, 18, 4, arr)
    net = small_net(5)
    curve = train_prediction(net, ds.subset(np.arange(1900)), ds.subset(np.arange(1900, 2000)),
                             OptimConfig(epochs=5), np.random.default_rng(0))
    assert len(curve) == 5 and all(np.isfinite(c[1]) and np.isfinite(c[2]) for c in curve)
    assert curve[-1][2] < 1e-4


def test_training_is_deterministic():
    ds = grid_dataset(300, spec=NET_SPEC)
    nets = []
    for _ in range(2):
        net = small_net(7)
        train_prediction(net, ds.subset(np.arange(250)), ds.subset(np.arange(250, 300)),
                         OptimConfig(epochs=2), np.random.default_rng(11))
        nets.append(net.copy_params())
    for a, b in zip(*nets):
        np.testing.assert_array_equal(a, b)


def test_training_rejects_empty_dataset():
    ds = grid_dataset(10, spec=NET_SPEC)
    with pytest.raises(InputValidationError):
        train_prediction(small_net(), ds.subset(np.arange(0)), ds, OptimConfig(epochs=1), np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(10))
def test_full_net_gradient(seed):
    rng = np.random.default_rng(seed)
    net = PredictionNet(2, 18, 18, 3, hidden=12, joint=8, rng=rng)
    for _, p in net.params():
        p.value += rng.normal(0, 0.1, size=p.shape).astype(np.float32)
    x = rng.random((1, 2, 18, 18))
    r = rng.normal(size=(1, 18, 18))

    def run():
        for _, p in net.params():
            p.zero_grad()
        y = net.forward(x, [seed % 3])
        net.backward(r)
        return float(np.sum(y * r))

    with float64_params(net.params()):
        assert grad_check(run, net.params(), h=1e-5, samples=40, rng=rng) < 5e-3


def test_checkpoint_round_trip(tmp_path):
    net = PredictionNet(4, 18, 18, 4, hidden=16, joint=8, rng=np.random.default_rng(9))
    net.save(tmp_path / "net.iexp")
    loaded = PredictionNet.load(tmp_path / "net.iexp")
    assert (loaded.hidden, loaded.joint, loaded.layers) == (16, 8, net.layers)
    for (n1, p1), (n2, p2) in zip(net.params(), loaded.params()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.value, p2.value)
    states = np.random.default_rng(0).integers(0, 256, size=(3, 4, 18, 18), dtype=np.uint8)
    np.testing.assert_array_equal(net.forward(states, [0, 1, 2]), loaded.forward(states, [0, 1, 2]))
