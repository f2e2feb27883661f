"""Cache-plan compilation and cache-aware execution for deterministic
iterative samplers over gated transformer backbones."""

from .backbones import (BackboneConfig, CacheMissError, FamilyRegistry, ScriptedProfile,
                        build_backbone, scripted_rates)
from .gating import COMPUTE, REUSE, GateDirective, ModuleCache, SiteTouch
from .metrics import PSNR_CAP, cosine_sim, l1_diff_norm, mse, psnr
from .planio import (PlanFormatError, dumps_plan, load_plan, load_stats, parse_plan,
                     save_plan, save_stats)
from .planner import (CachePlan, PlanInvariantError, ThresholdSet, calibrate, initial_plan,
                      quantile_cut, rate_source_step, resample_correct, warmup_steps)
from .presets import PRESETS, preset_fields, thresholds_from_fields
from .rates import (RATE_EPS, RateCollection, RateMatrix, StepRateVector, collect_rates,
                    compare_rate_matrices, export_heatmap, matrix_from_csv, matrix_to_csv,
                    rho_layer)
from .sampler import AllComputeExecutor, SampleSchedule, make_inputs, run_trajectory
from .scheduler import (FidelityReport, PlanExecutor, RunStats, baseline_run, compare_runs,
                        execute_plan)

__version__ = "0.1.0"
