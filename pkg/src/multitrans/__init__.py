"""Weakly-supervised multi-sensor event detection with attention-based fusion.

The package is organized in layers:

* :mod:`multitrans.tensor` — float64 tensors with reverse-mode autodiff and
  a finite-difference gradient oracle;
* :mod:`multitrans.model` — the fusion network (per-modality embedders,
  sensor identity encoding, Transformer blocks over the sensor axis, fusion
  heads, sigmoid classifier) plus checkpointing;
* :mod:`multitrans.training` — multiple-instance training from clip-level
  weak labels with class-weighted BCE and AdamW;
* :mod:`multitrans.data` — a synthetic scene generator with planted,
  probe-verifiable cross-sensor structure;
* :mod:`multitrans.evaluation` — frame-level average precision, reports,
  and attention-weight dumps;
* :mod:`multitrans.cli` — the ``multitrans`` command-line entry point.
"""

from .data import (
    BagLabel,
    ClassSpec,
    EventDataset,
    FeatureClip,
    GenConfig,
    generate_dataset,
    generate_scene,
    load_dataset,
    save_dataset,
    weak_label_from_strong,
)
from .errors import (
    ContractError,
    GenerationError,
    MultitransError,
    NumericError,
    ShapeError,
    StateError,
)
from .evaluation import (
    AttentionDump,
    EvalReport,
    UndefinedAP,
    average_precision,
    dump_attention,
    evaluate,
)
from .model import (
    AttentionRecord,
    ModelConfig,
    ModelParams,
    forward_clip,
    forward_frame,
    forward_frames,
    init_params,
    load_checkpoint,
    mhsa,
    param_count,
    save_checkpoint,
    sensor_encode,
    threshold_activity,
    transformer_block,
)
from .probe import ProbeResult, probe_class_ap
from .tensor import ComputationTape, Tensor, backward, finite_difference_grad, no_grad
from .training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    bag_predict,
    class_weights,
    lr_schedule,
    sample_clip,
    train,
    weighted_bce,
)

__version__ = "0.1.0"
