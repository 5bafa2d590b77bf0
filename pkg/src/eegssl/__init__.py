"""Self-supervised EEG representation learning via masked latent prediction."""

from .data import (
    EegDataset,
    EegWindow,
    NoiseSpec,
    SplitSpec,
    SyntheticSpec,
    apply_noise,
    load_dataset,
    split,
    synthesize_dataset,
)
from .embedding import EmbedConfig, PatchEmbedding, build_embedding
from .masking import (
    MaskConfig,
    MaskPlan,
    make_block_plan,
    make_plan,
    make_random_plan,
    make_ssp_plan,
    make_views,
    ssp_block_size,
)
from .networks import EncoderConfig, Model, build_model, count_params, standardize_rows
from .training import (
    EmaSchedule,
    LossBreakdown,
    LossConfig,
    TrainConfig,
    Trainer,
    covariance_loss,
    ema_update,
    multi_view_loss,
    pretrain,
    reconstruction_loss,
    total_loss,
    variance_loss,
)
from .evaluation import (
    MetricReport,
    compute_metrics,
    extract_representations,
    fine_tune,
    linear_probe,
    robustness_eval,
)

__version__ = "0.1.0"
