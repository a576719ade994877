"""Single-channel sequence-to-sequence sleep staging with transfer learning.

Modules:

    dataio       recording format, preparation ops, synthetic cohorts
    spectrogram  129x29 log-power epoch images
    numerics     minimal reverse-mode autodiff substrate
    network      the staging model, its loss, and checkpoints
    training     sequence sampling, Adam, pretraining, finetuning
    transfer     the five layer-freezing transfer regimes
    evaluation   fused sliding-window inference, metrics, LOSO harness
    cli          the `sleepseq` command
"""

__version__ = "0.1.0"

from .dataio import (  # noqa: F401
    DomainShift,
    RawLabel,
    Recording,
    StageLabel,
    SyntheticCohortConfig,
    generate_synthetic_cohort,
    load_cohort,
    load_recording,
    save_cohort,
    save_recording,
)
from .evaluation import EvalReport, compute_metrics, loso_cv, sliding_infer  # noqa: F401
from .network import HyperParams, ModelParams, load_checkpoint, save_checkpoint  # noqa: F401
from .training import TrainConfig, finetune, pretrain  # noqa: F401
from .transfer import CohortSplit, Regime, mask_for, run_regime  # noqa: F401
