import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from tiny_pipeline import MAPPING, TinyPipeline, run_prompt

from planadapter import (AdapterPlan, attach, calibrate_external, detach, load_mapping,
                         load_plan_file, save_plan_file)
from planadapter.calibrate import CalibrationError
from planadapter.hooks import AttachError


def make_plan(steps=8, layers=2, families=("mhsa", "ffn"), gates_on=(), step_on=()):
    gates = np.zeros((steps, layers, len(families)), dtype=np.uint8)
    for t in gates_on:
        gates[t] = 1
    step_gate = np.zeros(steps, dtype=np.uint8)
    for t in step_on:
        step_gate[t] = 1
    cuts = {f: 0.5 for f in families}
    cuts["step"] = 0.5
    thr = {"tau_step": 0.5, "tau_warmup": 0.0}
    thr.update({f"tau_{f}": 0.5 for f in families})
    return AdapterPlan(steps=steps, layers=layers, families=tuple(families),
                       gates=gates, step_gate=step_gate, cut_values=cuts,
                       thresholds=thr, phase="corrected")


class TestAttach:
    def test_all_zero_plan_is_bit_identical(self):
        ref = TinyPipeline(seed=3).generate(11)
        pipeline = TinyPipeline(seed=3)
        attach(pipeline, make_plan(), MAPPING)
        out = pipeline.generate(11)
        assert torch.equal(ref, out)

    def test_step_skips_bound_denoiser_calls(self):
        pipeline = TinyPipeline(seed=3)
        state = attach(pipeline, make_plan(step_on=(3, 4, 6)), MAPPING)
        pipeline.generate(11)
        assert state.denoiser_calls == pipeline.num_steps - 3

    def test_step_skip_matches_substitution_oracle(self):
        # Explicit z_t <- z_{t-1} substitution on an unpatched twin must
        # reproduce the patched run bit-for-bit.
        patched = TinyPipeline(seed=3)
        attach(patched, make_plan(step_on=(4,)), MAPPING)
        got = patched.generate(11)

        twin = TinyPipeline(seed=3)
        gen = torch.Generator().manual_seed(11)
        x = torch.randn(twin.tokens, twin.dim, generator=gen)
        z_prev = None
        with torch.no_grad():
            for t in range(twin.num_steps):
                z = z_prev if t == 4 else twin.denoiser(x, float(twin.sigma[t]))
                x = x + (twin.sigma[t + 1] - twin.sigma[t]) * z
                z_prev = z
        assert torch.equal(got, x)

    def test_mask_rule_after_step_skip(self):
        pipeline = TinyPipeline(seed=3)
        # reuse requested everywhere; skip at t=4 must force t=5 to recompute
        plan = make_plan(gates_on=range(1, 7), step_on=(4,))
        state = attach(pipeline, plan, MAPPING)
        pipeline.generate(11)
        layers = 2
        # executed steps: 0..3 and 5..7. t=0 computes, t=1..3 reuse,
        # t=5 recomputes after the mask, t=6 reuses again, t=7 computes (plan)
        assert state.computed["mhsa"] == layers * 3  # t=0, t=5, t=7
        assert state.reused["mhsa"] == layers * 4    # t=1,2,3,6

    def test_work_counters_account_all_sites(self):
        pipeline = TinyPipeline(seed=3)
        plan = make_plan(gates_on=(2, 5), step_on=(3,))
        state = attach(pipeline, plan, MAPPING)
        pipeline.generate(11)
        for fam in ("mhsa", "ffn"):
            executed_sites = (pipeline.num_steps - 1) * 2  # one skipped step, L=2
            assert state.computed[fam] + state.reused[fam] == executed_sites

    def test_detach_restores_pipeline(self):
        pipeline = TinyPipeline(seed=3)
        ref = pipeline.generate(11)
        attach(pipeline, make_plan(step_on=(3,)), MAPPING)
        patched = pipeline.generate(11)
        assert not torch.equal(ref, patched)
        detach(pipeline)
        assert torch.equal(pipeline.generate(11), ref)

    def test_step_count_mismatch_refused(self):
        pipeline = TinyPipeline(seed=3, num_steps=10)
        with pytest.raises(AttachError, match="steps"):
            attach(pipeline, make_plan(steps=8), MAPPING)

    def test_unmapped_family_refused(self):
        pipeline = TinyPipeline(seed=3)
        mapping = {"denoiser": "denoiser",
                   "families": {"mhsa": ["denoiser.blocks.{layer}.attn"]}}
        with pytest.raises(AttachError, match="ffn"):
            attach(pipeline, make_plan(), mapping)

    def test_missing_module_path_refused(self):
        pipeline = TinyPipeline(seed=3)
        mapping = {"denoiser": "denoiser",
                   "families": {"mhsa": ["denoiser.blocks.{layer}.attn"],
                                "ffn": ["denoiser.blocks.{layer}.bogus"]}}
        with pytest.raises(AttachError, match="bogus"):
            attach(pipeline, make_plan(), mapping)

    def test_plan_reused_across_generations(self):
        pipeline = TinyPipeline(seed=3)
        state = attach(pipeline, make_plan(step_on=(3,)), MAPPING)
        a1 = pipeline.generate(11)
        a2 = pipeline.generate(12)
        a3 = pipeline.generate(11)
        assert torch.equal(a1, a3)
        assert not torch.equal(a1, a2)
        assert state.denoiser_calls == 3 * (pipeline.num_steps - 1)


class TestMappingFiles:
    def test_flux_style_five_family_mapping_validates(self, tmp_path):
        mapping = {
            "denoiser": "transformer",
            "families": {
                "dual_attn": ["transformer.dual.{layer}.attn_image",
                              "transformer.dual.{layer}.attn_context"],
                "dual_ff": ["transformer.dual.{layer}.ff_image"],
                "dual_context_ff": ["transformer.dual.{layer}.ff_context"],
                "single_attn": ["transformer.single.{layer}.attn"],
                "single_ff": ["transformer.single.{layer}.ff"],
            },
        }
        path = tmp_path / "flux_mapping.json"
        path.write_text(json.dumps(mapping))
        fm = load_mapping(str(path))
        assert set(fm.families) == {"dual_attn", "dual_ff", "dual_context_ff",
                                    "single_attn", "single_ff"}
        assert len(fm.sub_sites("dual_attn")) == 2

    def test_pattern_without_layer_placeholder_rejected(self):
        with pytest.raises(ValueError, match="layer"):
            load_mapping({"families": {"mhsa": ["denoiser.attn"]}})


class TestCalibrateExternal:
    THRESHOLDS = {"tau_step": 0.5, "tau_warmup": 0.1, "tau_mhsa": 0.4, "tau_ffn": 0.4}

    def test_deterministic_across_runs(self, tmp_path):
        prompts = [1, 2]
        paths = []
        for i in range(2):
            pipeline = TinyPipeline(seed=3)
            path = str(tmp_path / f"plan{i}.json")
            calibrate_external(pipeline, prompts, dict(self.THRESHOLDS), MAPPING,
                               run_prompt, steps=8, layers=2, out_path=path)
            paths.append(path)
        assert open(paths[0]).read() == open(paths[1]).read()

    def test_five_prompts_supported(self, tmp_path):
        pipeline = TinyPipeline(seed=3)
        plan = calibrate_external(pipeline, [1, 2, 3, 4, 5], dict(self.THRESHOLDS),
                                  MAPPING, run_prompt, steps=8, layers=2)
        assert plan.steps == 8 and plan.phase == "corrected"

    def test_warmup_and_boundary_forcing(self):
        pipeline = TinyPipeline(seed=3)
        thr = dict(self.THRESHOLDS)
        thr["tau_warmup"] = 0.25  # first 2 of 8 steps
        plan = calibrate_external(pipeline, [7], thr, MAPPING, run_prompt,
                                  steps=8, layers=2)
        assert not plan.gates[:2].any() and not plan.step_gate[:2].any()
        assert not plan.gates[7].any() and not plan.step_gate[7]

    def test_stochastic_pipeline_refused(self):
        pipeline = TinyPipeline(seed=3)
        pipeline.deterministic = False
        with pytest.raises(CalibrationError, match="deterministic"):
            calibrate_external(pipeline, [1], dict(self.THRESHOLDS), MAPPING,
                               run_prompt, steps=8, layers=2)

    def test_calibrated_plan_round_trips_and_attaches(self, tmp_path):
        pipeline = TinyPipeline(seed=3)
        path = str(tmp_path / "plan.json")
        calibrate_external(pipeline, [1, 2], dict(self.THRESHOLDS), MAPPING,
                           run_prompt, steps=8, layers=2, out_path=path)
        plan = load_plan_file(path)
        fresh = TinyPipeline(seed=3)
        state = attach(fresh, plan, MAPPING)
        fresh.generate(5)
        assert state.denoiser_calls == 8 - int(plan.step_gate.sum())

    def test_schema_fidelity_no_extra_fields(self, tmp_path):
        pipeline = TinyPipeline(seed=3)
        path = str(tmp_path / "plan.json")
        calibrate_external(pipeline, [1], dict(self.THRESHOLDS), MAPPING,
                           run_prompt, steps=8, layers=2, out_path=path)
        obj = json.loads(open(path).read())
        assert set(obj) == {"format_version", "steps", "layers", "families", "gates",
                            "step_gate", "cut_values", "thresholds", "tie_groups",
                            "phase", "provenance"}


class TestCrossComponentInterop:
    def test_primary_plan_inspect_reads_adapter_plan(self, tmp_path):
        pipeline = TinyPipeline(seed=3)
        path = str(tmp_path / "plan.json")
        calibrate_external(pipeline, [1, 2],
                           {"tau_step": 0.5, "tau_warmup": 0.0, "tau_mhsa": 0.4,
                            "tau_ffn": 0.4},
                           MAPPING, run_prompt, steps=8, layers=2, out_path=path)
        before = open(path).read()
        proc = subprocess.run([sys.executable, "-m", "cacheplan.cli", "plan-inspect", path],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "steps=8 layers=2" in proc.stdout
        assert "mhsa: reuse_fraction=" in proc.stdout
        assert open(path).read() == before  # consumed unmodified

    def test_primary_saved_plan_attaches_here(self, tmp_path):
        # plans travel the other way too: primary calibrates, adapter consumes
        code = (
            "from cacheplan import *;"
            "from cacheplan.presets import thresholds_from_fields;"
            "bb = build_backbone(BackboneConfig(kind='toy_dit', layers=2, tokens=8, "
            "channels=8, heads=2, cond_classes=2, seed=1));"
            "sched = SampleSchedule.linear(8);"
            "thr = thresholds_from_fields({'tau_step': 0.5, 'tau_warmup': 0.0, "
            "'tau_attn': 0.5, 'tau_ffn': 0.5}, bb.registry, 'toy_dit');"
            "plan = calibrate(bb, sched, make_inputs(8, 8, 1, seed=2, cond_classes=2), thr);"
            f"save_plan(plan, r'{tmp_path}/primary_plan.json')"
        )
        proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        plan = load_plan_file(str(tmp_path / "primary_plan.json"))
        pipeline = TinyPipeline(seed=3)
        state = attach(pipeline, plan, MAPPING)
        pipeline.generate(4)
        assert state.denoiser_calls == 8 - int(plan.step_gate.sum())
