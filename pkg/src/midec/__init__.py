"""Toy vision-language decoding lab: calibrated contrastive sampling with a
trainable visual token purifier, plus the synthetic benchmark and tooling
needed to verify every piece end to end."""

__version__ = "0.1.0"

from . import runconfig, store, synthbench, tensorcore
from .cpmi import CpmiReport, cpmi_pointwise, sequence_log_prob, token_log_prob
from .decoding import (
    DecodeConfig,
    DecodeResult,
    StepRecord,
    calibrate_logits,
    decode,
    top_k_mask,
    truncate_candidates,
)
from .errors import (
    CheckpointError,
    CorruptCheckpointError,
    EnumerationTooLargeError,
    InvalidConfigError,
    InvalidInputError,
    MidecError,
    NumericalError,
    SequenceTooLongError,
    UnsupportedFormatError,
)
from .model import (
    LvlmTrainConfig,
    ModelConfig,
    VisualMask,
    all_ones_mask,
    forward,
    init_lvlm,
    load_model,
    n_params,
    save_model,
    train_lvlm,
)
from .oracle import (
    OracleResult,
    lf_decode,
    mask_score,
    oracle_mask_search,
    verify_factorization,
)
from .purifier import (
    PurifierConfig,
    PurifierTrainConfig,
    extract_mask,
    init_purifier,
    load_purifier,
    purifier_forward,
    save_purifier,
    train_purifier,
    training_loss,
)
from .tensorcore import Rng
