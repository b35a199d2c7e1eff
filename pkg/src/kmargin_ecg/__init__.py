"""K-margin segment selection and voting for noisy single-lead ECG records."""

from .augmentation import AugmentConfig, SegmentArray, augment_dataset, compute_strides, slide_and_cut
from .classifier import (
    LookupClassifier,
    RcrConfig,
    RcrModel,
    build_model,
    forward,
    gradient_check,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
    train,
)
from .config import RunConfig
from .kmargin import (
    alpha,
    k_labels,
    least_margin_segment,
    margin,
    most_confident_label,
    predict_record,
    select_alpha_segments,
    train_with_selection,
    vote,
)
from .metrics import confusion, f1_aggregates, f1_per_class, hamming_loss, macro_precision_recall
from .pipeline import run_experiment
from .signal_io import Dataset, EcgRecord, RhythmClass, SynthSpec, generate_synthetic, load_dataset, save_predictions

__version__ = "0.1.0"
