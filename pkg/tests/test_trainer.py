import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topomix import env as E
from topomix.domain import CommAction, ConfigError, Episode, RunConfig
from topomix.numerics import TrainingFault, global_norm, make_rng
from topomix.trainer import (ReplayBuffer, Trainer, checkpoint_bytes, epsilon, rollout,
                             trainer_from_bytes)

SMALL = dict(hidden_dim=8, mixing_dim=4, hyper_hidden=4, batch_size=8, target_interval=10,
             episodes=60, checkpoint_interval=20)


def small(**kw):
    return RunConfig(**{**SMALL, **kw})


def dummy_episode(tag, T=1, n=2, D=3):
    return Episode(np.full((T, n, D), float(tag)), np.zeros((T, n), dtype=np.int64),
                   np.ones((T, n, n), dtype=bool), np.zeros((T, 5)), float(tag))


def test_buffer_evicts_oldest():
    buf = ReplayBuffer(5000)
    for k in range(5001):
        buf.add(dummy_episode(k))
    assert len(buf) == 5000
    rewards = [e.reward for e in buf.episodes()]
    assert rewards[0] == 1.0 and rewards[-1] == 5000.0
    assert 0.0 not in rewards


@settings(max_examples=50, deadline=None)
@given(cap=st.integers(1, 12), n=st.integers(0, 40))
def test_buffer_is_fifo(cap, n):
    buf = ReplayBuffer(cap)
    for k in range(n):
        buf.add(dummy_episode(k))
        assert len(buf) <= cap
    assert [e.reward for e in buf.episodes()] == [float(k) for k in range(max(0, n - cap), n)]


def test_buffer_sampling_needs_a_full_batch():
    buf = ReplayBuffer(10)
    for k in range(7):
        buf.add(dummy_episode(k))
    with pytest.raises(ValueError):
        buf.sample(8, make_rng(0))
    buf.add(dummy_episode(7))
    assert len({e.reward for e in buf.sample(8, make_rng(0))}) == 8


def test_epsilon_examples():
    assert epsilon(0, 2000) == 1.0
    assert epsilon(2000, 2000) == pytest.approx(0.05, abs=1e-15)
    assert epsilon(1000, 2000) == pytest.approx(0.525, abs=1e-15)
    tr = Trainer(small(episodes=2000))
    assert tr.epsilon_for(0) == 1.0
    assert tr.epsilon_for(1999) == pytest.approx(0.05, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(total=st.integers(1, 5000), a=st.integers(0, 5000), b=st.integers(0, 5000))
def test_epsilon_non_increasing_and_bounded(total, a, b):
    lo, hi = sorted((a, b))
    assert epsilon(hi, total) <= epsilon(lo, total)
    assert 0.05 - 1e-12 <= epsilon(hi, total) <= 1.0


def test_fresh_network_greedy_is_all_solo():
    cfg = RunConfig(hidden_dim=16)
    tr = Trainer(cfg)
    for task in tr.tasks[:3]:
        ep = rollout(tr.agent, task, cfg, tr.env_cfg, 0.0, make_rng(0))
        assert np.all(ep.actions == CommAction.SOLO_PROCESS)


@pytest.mark.parametrize("T", [2, 3])
def test_episode_length_follows_config(T):
    cfg = small(n_rounds=T)
    tr = Trainer(cfg)
    ep = tr.run_episode(tr.tasks[0], 1.0)
    assert ep.actions.shape == (T, 3)
    assert ep.observations.shape == (T, 3, cfg.obs_dim)
    assert ep.states.shape == (T, cfg.state_dim)
    np.testing.assert_array_equal(ep.graphs[0], np.eye(3, dtype=bool))
    # each round is encoded on the graph the previous round produced
    np.testing.assert_array_equal(ep.graphs[1], ep.executed[0])


def test_rollout_wrong_agent_count():
    cfg = small()
    tr = Trainer(cfg)
    task = E.TaskSpec(2, 2, ((0,), (1,)))
    with pytest.raises(ConfigError):
        tr.run_episode(task, 0.0)


def test_metrics_records():
    tr = Trainer(small(episodes=12))
    recs = tr.train()
    assert [r.episode for r in recs] == list(range(12))
    assert all(sum(r.action_counts) == 3 * 2 for r in recs)
    assert all(np.isnan(r.td_loss) for r in recs[:7])
    assert all(np.isfinite(r.td_loss) for r in recs[7:])
    assert tr.grad_steps == 5


def test_targets_frozen_between_syncs():
    tr = Trainer(small(target_interval=5, episodes=40))
    tr.train(until=8)                 # first gradient step happens at episode 8
    assert tr.grad_steps == 1
    frozen = tr.target_agent.params.flat()
    while tr.grad_steps < 4:
        tr.train_episode()
    np.testing.assert_array_equal(tr.target_agent.params.flat(), frozen)
    assert not np.array_equal(tr.agent.params.flat(), frozen)
    tr.train_episode()
    assert tr.grad_steps == 5
    np.testing.assert_array_equal(tr.target_agent.params.flat(), tr.agent.params.flat())
    np.testing.assert_array_equal(tr.target_mixer.params.flat(), tr.mixer.params.flat())


def test_train_step_clips_joint_gradient(monkeypatch):
    import topomix.trainer as T
    tr = Trainer(small(clip_norm=1e-3))
    tr.train(until=8)
    seen = {}
    real_step = T.Adam.step

    def spy(self, store, grads):
        seen.setdefault("g", {}).update(grads)
        return real_step(self, store, grads)

    monkeypatch.setattr(T.Adam, "step", spy)
    tr.train_step(tr.buffer.sample(8, make_rng(0)))
    assert tr.last_grad_norm > 1e-3
    assert global_norm(seen["g"]) == pytest.approx(1e-3, rel=1e-9)


def test_determinism_500_steps():
    runs = []
    for _ in range(2):
        tr = Trainer(small(episodes=507))
        recs = tr.train()
        assert tr.grad_steps == 500
        runs.append((recs, checkpoint_bytes(tr)))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_non_finite_loss_is_a_fault():
    tr = Trainer(small())
    tr.train(until=8)
    batch = tr.buffer.sample(8, make_rng(0))
    batch[0].reward = float("nan")
    with pytest.raises(TrainingFault, match="non-finite TD loss"):
        tr.train_step(batch)


def test_checkpoint_round_trip_bytes(tmp_path):
    tr = Trainer(small())
    b0 = checkpoint_bytes(tr)
    assert checkpoint_bytes(trainer_from_bytes(b0)) == b0
    tr.train(until=15)
    p = tmp_path / "a.aqmx"
    tr.save(p)
    again = Trainer.load(p)
    assert checkpoint_bytes(again) == p.read_bytes()
    assert b0[:4] == b"AQMX"


def test_checkpoint_refusals(tmp_path):
    tr = Trainer(small())
    data = checkpoint_bytes(tr)
    with pytest.raises(ConfigError, match="N=3 does not match expected 4"):
        trainer_from_bytes(data, small(n_agents=4))
    with pytest.raises(ConfigError, match="magic"):
        trainer_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ConfigError, match="version"):
        trainer_from_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(ConfigError, match="truncated"):
        trainer_from_bytes(data[:-3])
    with pytest.raises(ConfigError, match="trailing"):
        trainer_from_bytes(data + b"\0")
    with pytest.raises(ConfigError):
        Trainer.load(tmp_path / "missing.aqmx")


@pytest.mark.parametrize("capacity", [5000, 50])
def test_resume_matches_uninterrupted(capacity):
    cfg = small(episodes=460, buffer_capacity=capacity)
    straight = Trainer(cfg)
    full = straight.train()
    first = Trainer(cfg)
    head = first.train(until=407)      # 400 gradient steps
    assert first.grad_steps == 400
    resumed = trainer_from_bytes(checkpoint_bytes(first))
    tail = resumed.train()
    assert head + tail == full
    assert [r.td_loss for r in tail] == [r.td_loss for r in full[407:]]
    assert checkpoint_bytes(resumed) == checkpoint_bytes(straight)
