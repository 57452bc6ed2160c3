import numpy as np
import pytest

from abrkit import nn
from abrkit.clustering import GENERAL, UNCERTAIN, ConditionLabel
from abrkit.policies import GreedyPolicy, Observation, PolicyModel, actor_forward
from abrkit.simulator import QoEParams, generate_manifest, run_episode
from abrkit.traces import TraceArchetype, resample_1hz, synthesize_trace
from abrkit.training import (
    EmptyRollout,
    NoTraces,
    Rollout,
    TrainConfig,
    ZooMissingEntry,
    a3c_losses,
    collect_rollout,
    compute_advantages,
    compute_returns,
    evaluate_policy,
    load_zoo,
    save_zoo,
    train_model,
    train_zoo,
)
from gradcheck import assert_gradients_match

QOE = QoEParams()


def small_model(seed=0):
    return PolicyModel(n_rates=5, seed=seed, conv_channels=4, hidden=8)


def make_trace(mean=3.0, seed=0, duration=150):
    arch = TraceArchetype("StableHigh", mean=mean, noise_std=0.1, seed=seed)
    return resample_1hz(synthesize_trace(arch, duration))


def tiny_rollout(model, chunks=6, seed=0):
    manifest = generate_manifest(total_chunks=chunks, jitter=0.1, seed=seed)
    return collect_rollout(model, manifest, make_trace(seed=seed), QOE, np.random.default_rng(seed))


class TestReturnsAndAdvantages:
    def test_undiscounted_suffix_sums(self):
        assert compute_returns(np.array([1.0, 1.0, 1.0]), gamma=1.0).tolist() == [3.0, 2.0, 1.0]

    def test_gamma_zero_is_reward_minus_value(self):
        rollout = Rollout([], np.array([0, 1]), np.array([2.0, 5.0]), np.array([1.0, 1.0]))
        assert compute_advantages(rollout, gamma=0.0).tolist() == [1.0, 4.0]

    def test_exact_values_zero_advantage(self):
        rewards = np.array([1.0, 2.0, 3.0])
        values = compute_returns(rewards, 0.9)
        rollout = Rollout([], np.zeros(3, dtype=int), rewards, values)
        assert np.allclose(compute_advantages(rollout, 0.9), 0.0)

    def test_discounting(self):
        returns = compute_returns(np.array([1.0, 1.0]), gamma=0.5)
        assert returns.tolist() == [1.5, 1.0]

    def test_empty_rollout(self):
        with pytest.raises(EmptyRollout):
            compute_returns(np.array([]), 0.9)


class TestA3CLoss:
    def test_uniform_policy_entropy(self):
        model = small_model()
        for head in (model.actor.head,):
            head.w.data[:] = 0.0
            head.b.data[:] = 0.0
        rollout = tiny_rollout(model, chunks=5)
        advantages = compute_advantages(rollout, 0.99)
        _, _, stats = a3c_losses(model, rollout, advantages, entropy_weight=0.5, gamma=0.99)
        assert stats["mean_entropy"] == pytest.approx(np.log(5), abs=1e-9)

    def test_zero_advantages_kill_pg_term(self):
        model = small_model()
        rollout = tiny_rollout(model)
        zero = np.zeros(len(rollout))
        actor_loss, _, stats = a3c_losses(model, rollout, zero, entropy_weight=0.5, gamma=0.99)
        # only the entropy term remains
        expected = -0.5 * stats["mean_entropy"] * len(rollout)
        assert actor_loss.item() == pytest.approx(expected, rel=1e-9)

    def test_zero_reward_zero_critic_loss(self):
        model = small_model()
        model.critic.head.w.data[:] = 0.0
        model.critic.head.b.data[:] = 0.0
        rollout = tiny_rollout(model)
        rollout.rewards[:] = 0.0
        rollout.values[:] = 0.0
        adv = compute_advantages(rollout, 0.99)
        _, critic_loss, _ = a3c_losses(model, rollout, adv, 0.5, 0.99)
        assert critic_loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_actor_loss_gradient_matches_finite_differences(self):
        model = PolicyModel(n_rates=5, seed=3, conv_channels=2, hidden=3)
        rollout = tiny_rollout(model, chunks=2, seed=4)
        advantages = compute_advantages(rollout, 0.99)

        def build():
            actor_loss, _, _ = a3c_losses(model, rollout, advantages, entropy_weight=0.5, gamma=0.99)
            return actor_loss

        params = list(model.actor.parameters().values())
        assert_gradients_match(build, params, what="actor loss")

    def test_length_mismatch(self):
        model = small_model()
        rollout = tiny_rollout(model)
        with pytest.raises(nn.ShapeMismatch):
            a3c_losses(model, rollout, np.zeros(len(rollout) + 1), 0.5, 0.99)


class TestTrainModel:
    def test_zero_episodes_returns_fresh_model(self):
        config = TrainConfig(episodes=0, workers=1, seed=5, conv_channels=4, hidden=8)
        manifest = generate_manifest(total_chunks=5, seed=0)
        model = train_model(config, [make_trace()], manifest, QOE)
        fresh = PolicyModel(n_rates=5, seed=5, conv_channels=4, hidden=8)
        for k, v in model.state_dict().items():
            assert np.array_equal(v, fresh.state_dict()[k])

    def test_no_traces(self):
        config = TrainConfig(episodes=1, workers=1)
        with pytest.raises(NoTraces):
            train_model(config, [], generate_manifest(total_chunks=3, seed=0), QOE)

    def test_single_worker_determinism(self):
        manifest = generate_manifest(total_chunks=8, jitter=0.1, seed=2)
        traces = [make_trace(seed=i) for i in range(2)]

        def run():
            config = TrainConfig(episodes=6, workers=1, seed=11, conv_channels=4, hidden=8, eval_every=2)
            return train_model(config, traces, manifest, QOE).state_dict()

        a, b = run(), run()
        assert sorted(a) == sorted(b)
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_entropy_weight_monotone_trend(self):
        # More entropy pressure never leaves the policy more deterministic.
        manifest = generate_manifest(total_chunks=8, jitter=0.1, seed=3)
        traces = [make_trace(seed=9)]
        probe = [
            Observation(
                throughput_hist=np.full(8, t), download_hist=np.full(8, 0.5),
                next_sizes=manifest.sizes[0].copy(), buffer=b, last_bitrate_index=i,
                chunks_remaining=4, total_chunks=8,
                max_chunk_size=manifest.max_chunk_size, ladder_kbps=manifest.ladder_kbps,
            )
            for t, b, i in [(0.5, 2.0, 0), (2.0, 10.0, 2), (4.0, 40.0, 4)]
        ]

        def mean_entropy(beta):
            config = TrainConfig(
                episodes=30, workers=1, seed=21, conv_channels=4, hidden=8,
                entropy_weight=beta, eval_every=1000,
            )
            model = train_model(config, traces, manifest, QOE)
            ent = []
            for obs in probe:
                p = actor_forward(model, obs)
                ent.append(-(p * np.log(p + 1e-12)).sum())
            return float(np.mean(ent))

        entropies = [mean_entropy(beta) for beta in (0.0, 0.5, 50.0)]
        assert entropies[0] <= entropies[1] + 1e-6 <= entropies[2] + 2e-6


class TestTrainZoo:
    def labeled(self, labels):
        return [(make_trace(seed=i), lab) for i, lab in enumerate(labels)]

    def config(self):
        return TrainConfig(episodes=2, workers=1, seed=0, conv_channels=2, hidden=3, eval_every=1)

    def manifest(self):
        return generate_manifest(total_chunks=4, seed=1)

    def test_missing_clusters_fall_back(self):
        labeled = self.labeled([ConditionLabel.cluster(0), ConditionLabel.cluster(1)])
        zoo = train_zoo(self.config(), labeled, k=5, manifests=self.manifest(), qoe_params=QOE)
        for idx in (2, 3, 4):
            assert zoo.entries[f"cluster-{idx}"].fallback
        assert not zoo.entries["cluster-0"].fallback
        assert not zoo.entries["general"].fallback

    def test_empty_uncertain_falls_back_to_general(self):
        labeled = self.labeled([ConditionLabel.cluster(0)])
        zoo = train_zoo(self.config(), labeled, k=1, manifests=self.manifest(), qoe_params=QOE)
        assert zoo.entries[UNCERTAIN.key].fallback
        general = zoo.resolve(GENERAL)
        assert zoo.resolve(UNCERTAIN) is general

    def test_full_zoo_has_seven_entries(self):
        labels = [ConditionLabel.cluster(i) for i in range(5)] + [UNCERTAIN]
        zoo = train_zoo(self.config(), self.labeled(labels), k=5, manifests=self.manifest(), qoe_params=QOE)
        assert len(zoo.entries) == 7

    def test_resolve_without_general_raises(self):
        from abrkit.training import ModelZoo

        with pytest.raises(ZooMissingEntry):
            ModelZoo().resolve(GENERAL)

    def test_save_load_round_trip(self, tmp_path):
        labeled = self.labeled([ConditionLabel.cluster(0), UNCERTAIN])
        zoo = train_zoo(self.config(), labeled, k=1, manifests=self.manifest(), qoe_params=QOE)
        save_zoo(zoo, tmp_path / "zoo")
        again = load_zoo(tmp_path / "zoo")
        assert sorted(again.entries) == sorted(zoo.entries)
        obs_probe = tiny_rollout(small_model(), chunks=2).observations[0]
        for key, entry in zoo.entries.items():
            if entry.fallback:
                assert again.entries[key].fallback
            else:
                a = actor_forward(entry.model, obs_probe)
                b = actor_forward(again.entries[key].model, obs_probe)
                assert np.array_equal(a, b)


class TestEvaluatePolicy:
    def test_matches_direct_episode_mean(self):
        model = small_model()
        manifest = generate_manifest(total_chunks=6, seed=4)
        trace = make_trace(seed=2)
        direct = run_episode(manifest, trace, GreedyPolicy(model), QOE)
        got = evaluate_policy(model, [manifest], [trace], QOE)
        assert got == pytest.approx(direct.mean_qoe())
