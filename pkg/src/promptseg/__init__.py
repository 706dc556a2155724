"""Synthetic-abnormality prompt training and validation-task model selection
for unsupervised brain lesion segmentation."""

__version__ = "0.1.0"

from .geometry import (
    STROKE_SIZES,
    TUMOR_SIZES,
    PolyhedronSpec,
    SizeDistribution,
    place_in_brain,
    rasterize_polyhedron,
    sample_size,
)
from .io import load_mask, load_volume, write_volume
from .metrics import aggregate, compute_case_metrics, paired_t_test
from .pasting import PlusSetSpec, build_plus_set, paste_sample
from .refseg import RefModel, TrainConfig, fine_tune, lr_schedule, predict, train
from .selection import DEFAULT_BUDGETS, MetricCurve, SelectionResult, select_budget, select_epoch
from .synthesis import (
    LabeledSample,
    SynthesisConfig,
    apply_dark_component,
    apply_prompt_transform,
    make_weight_image,
    synth_prompt_sample,
    synth_validation_sample,
)
from .volume import BinaryMask, PhantomSpec, Volume, gaussian_blur, make_phantom, resample
