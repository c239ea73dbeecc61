import numpy as np
import pytest

from metacritic.agent import ActorCritic, HeadConfig, MacConfig
from metacritic.envs import BanditConfig, BanditEnv, GridWorldConfig, GridWorldEnv, TwoAFCConfig, TwoAFCEnv
from metacritic.rollout import EpisodeBatch, Trajectory, collect

TAB = HeadConfig("tabular", ())


def test_trajectory_rejects_misaligned_lengths():
    with pytest.raises(ValueError):
        Trajectory([np.zeros(2)], [0], [1.0])


def test_from_trajectories_roundtrip():
    t1 = Trajectory([np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros(2)], [1, 0], [0.5, -1.0])
    t2 = Trajectory([np.array([0.0, 1.0]), np.zeros(2)], [1], [2.0])
    batch = EpisodeBatch.from_trajectories([t1, t2])
    assert (batch.T, batch.B) == (2, 2)
    np.testing.assert_array_equal(batch.mask, [[True, True], [True, False]])
    np.testing.assert_array_equal(batch.actions[:, 1], [1, -1])
    back = batch.trajectory(0)
    assert back.actions == t1.actions and back.rewards == t1.rewards
    np.testing.assert_array_equal(np.stack(back.states[:2]), np.stack(t1.states[:2]))


def test_collect_2afc_shapes_and_reward_alignment():
    cfg = TwoAFCConfig(stimulus_steps=4)
    agent = ActorCritic(3, 2, seed=0)
    ro = collect(agent, TwoAFCEnv(cfg), 32, np.random.default_rng(0))
    b = ro.batch
    assert b.features.shape == (5, 32, 3) and b.mask.all()
    assert (b.actions[:-1] == -1).all() and (b.actions[-1] >= 0).all()
    np.testing.assert_array_equal(b.rewards[-1], np.where(ro.correct, 1.0, 0.0) * b.rewards[-1].max())
    assert ro.action_values.shape == ro.state_values.shape == ro.chosen_probs.shape == (32,)
    assert ro.env_steps == 5 * 32


def test_collect_bandit_single_step():
    ro = collect(ActorCritic(1, 2, TAB, TAB, TAB), BanditEnv(BanditConfig(stds=(0.0, 0.0))), 10,
                 np.random.default_rng(1))
    assert ro.batch.features.shape == (1, 10, 1)
    np.testing.assert_array_equal(ro.batch.rewards[0], np.where(ro.batch.actions[0] == 0, 1.0, 0.0))
    assert ro.correct is None and ro.env_steps == 10


def test_collect_lockstep_masks_finished_rows():
    env = GridWorldEnv(GridWorldConfig(max_steps=6))
    agent = ActorCritic(env.obs_dim, 4, TAB, TAB, TAB, seed=2)
    ro = collect(agent, env, 5, np.random.default_rng(2), MacConfig(budget=2))
    b = ro.batch
    assert b.T <= 6
    lengths = b.mask.sum(axis=0)
    for col, n in enumerate(lengths):
        assert b.mask[:n, col].all() and not b.mask[n:, col].any()
        assert (b.actions[n:, col] == -1).all()
    assert ro.action_values.size == int(b.decisions.sum()) == ro.env_steps
