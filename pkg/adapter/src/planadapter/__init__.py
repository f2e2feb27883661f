"""Attach cache-plan files to torch diffusion pipelines.

The adapter consumes plan JSON produced by the cacheplan package (or by its
own calibrator, which writes the same schema) and patches the mapped
submodule forwards so that each step consults the plan: the step gate first,
then per-(layer, family) reuse with cache overwrite and the one-shot mask
after step-level reuse.
"""

from .hooks import AdapterState, attach, detach
from .calibrate import calibrate_external
from .mapping import FamilyMapping, load_mapping
from .plans import AdapterPlan, load_plan_file, save_plan_file

__version__ = "0.1.0"
