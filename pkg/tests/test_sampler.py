import numpy as np
import pytest

from cacheplan.backbones import BackboneConfig, ScriptedProfile, build_backbone
from cacheplan.gating import GateDirective
from cacheplan.sampler import AllComputeExecutor, SampleSchedule, make_inputs, run_trajectory


def scripted(layers=1, tokens=4, channels=4, r=0.5, seed=2):
    cfg = BackboneConfig(kind="scripted", layers=layers, tokens=tokens,
                         channels=channels, heads=2, seed=seed)
    return build_backbone(cfg, ScriptedProfile.uniform(r))


class TestSchedule:
    def test_linear_default(self):
        s = SampleSchedule.linear(5)
        assert s.sigma[0] == 1.0 and s.sigma[-1] == 0.0 and len(s.sigma) == 6

    def test_too_few_steps(self):
        with pytest.raises(ValueError):
            SampleSchedule.linear(2)

    def test_non_monotone_rejected(self):
        with pytest.raises(ValueError):
            SampleSchedule(steps=3, sigma=np.array([1.0, 0.5, 0.6, 0.0]))

    def test_hash_stable(self):
        assert SampleSchedule.linear(6).content_hash() == SampleSchedule.linear(6).content_hash()
        assert SampleSchedule.linear(6).content_hash() != SampleSchedule.linear(7).content_hash()


class TestRunTrajectory:
    def test_same_seed_bit_identical(self):
        bb = scripted(layers=2)
        sched = SampleSchedule.linear(6)
        (x0, cond) = make_inputs(4, 4, 1, seed=5)[0]
        ex = AllComputeExecutor(2, bb.registry.families)
        t1, xf1, _ = run_trajectory(bb, sched, x0, cond, ex)
        t2, xf2, _ = run_trajectory(bb, sched, x0.copy(), cond, ex)
        assert np.array_equal(xf1, xf2)
        for a, b in zip(t1, t2):
            assert np.array_equal(a, b)

    def test_three_step_hand_unroll(self):
        bb = scripted(layers=1, r=0.5)
        sched = SampleSchedule.linear(3)
        x0, cond = make_inputs(4, 4, 1, seed=1)[0]
        ex = AllComputeExecutor(1, bb.registry.families)
        traj, x_final, _ = run_trajectory(bb, sched, x0, cond, ex)

        sig = sched.sigma
        x = x0.copy()
        for t in range(3):
            z = bb.reference_forward(x, cond, t)
            assert np.array_equal(traj[t], z)
            x = x + (sig[t + 1] - sig[t]) * z
        assert np.array_equal(x_final, x)

    def test_trajectory_length_is_steps(self):
        bb = scripted(layers=2)
        sched = SampleSchedule.linear(9)
        x0, cond = make_inputs(4, 4, 1, seed=3)[0]
        traj, _, stats = run_trajectory(bb, sched, x0, cond,
                                        AllComputeExecutor(2, bb.registry.families))
        assert len(traj) == 9
        assert stats.steps_total == 9

    def test_skip_executor_matches_substitution_oracle(self):
        # Executor that skips step 2; an explicit loop applying the same
        # z_t <- z_{t-1} substitution must produce the same x trajectory.
        bb = scripted(layers=2, r=0.8)
        sched = SampleSchedule.linear(5)
        x0, cond = make_inputs(4, 4, 1, seed=8)[0]

        class SkipAt:
            def __init__(self, skip_t, layers, families):
                self.skip_t = skip_t
                self.all = GateDirective.all_compute(layers, families)

            def gate_for_step(self, t, cache):
                return GateDirective.skip_step() if t == self.skip_t else self.all

        traj, x_final, stats = run_trajectory(bb, sched, x0, cond,
                                              SkipAt(2, 2, bb.registry.families))
        assert stats.step_skips == 1

        sig = sched.sigma
        x = x0.copy()
        z_prev = None
        for t in range(5):
            z = z_prev if t == 2 else bb.reference_forward(x, cond, t)
            assert np.array_equal(traj[t], z)
            x = x + (sig[t + 1] - sig[t]) * z
            z_prev = z
        assert np.array_equal(x_final, x)

    def test_skip_at_step_zero_rejected(self):
        bb = scripted()

        class SkipFirst:
            def gate_for_step(self, t, cache):
                return GateDirective.skip_step()

        with pytest.raises(RuntimeError, match="t=0"):
            run_trajectory(bb, SampleSchedule.linear(3), np.zeros((4, 4)), 0, SkipFirst())

    def test_shape_mismatch_rejected(self):
        bb = scripted()
        with pytest.raises(ValueError):
            run_trajectory(bb, SampleSchedule.linear(3), np.zeros((5, 4)), 0,
                           AllComputeExecutor(1, bb.registry.families))

    def test_nonfinite_state_aborts_with_step_index(self):
        bb = scripted()

        class Poison:
            def __init__(self, inner):
                self.inner = inner

            def gate_for_step(self, t, cache):
                return self.inner.gate_for_step(t, cache)

        sched = SampleSchedule(steps=3, sigma=np.array([1.0, 0.5, 0.25, 0.0]))
        x0 = np.full((4, 4), np.inf)
        with pytest.raises(FloatingPointError, match="t=0"):
            run_trajectory(bb, sched, x0, 0, Poison(AllComputeExecutor(1, bb.registry.families)))

    def test_flops_scale_linearly_in_steps(self):
        bb = scripted(layers=3)
        x0, cond = make_inputs(4, 4, 1, seed=4)[0]
        ex = AllComputeExecutor(3, bb.registry.families)
        _, _, s1 = run_trajectory(bb, SampleSchedule.linear(5), x0, cond, ex)
        _, _, s2 = run_trajectory(bb, SampleSchedule.linear(10), x0, cond, ex)
        assert s2.flops == 2 * s1.flops


class TestMakeInputs:
    def test_deterministic_and_distinct(self):
        a = make_inputs(6, 4, 3, seed=7, cond_classes=2)
        b = make_inputs(6, 4, 3, seed=7, cond_classes=2)
        for (xa, ca), (xb, cb) in zip(a, b):
            assert np.array_equal(xa, xb) and ca == cb
        assert not np.array_equal(a[0][0], a[1][0])
        assert [c for _, c in a] == [0, 1, 0]
