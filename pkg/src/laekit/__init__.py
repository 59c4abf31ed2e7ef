"""Text-driven latent attribute editing for multiplane-image face generators."""
from .backbones import BackboneBundle, EncoderBundle, load_backbone, load_encoders, toy_backbone, toy_encoders
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .core import (
    FRONTAL,
    CameraPose,
    LatentSplit,
    MultiplaneImage,
    RenderedImage,
    apply_edit,
    composite_mpi,
    merge_latent,
    pose_grid,
    split_latent,
)
from .errors import (
    BackboneUnavailableError,
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    DegenerateEmbeddingError,
    NonFiniteLossError,
)
from .evaluation import MetricReport, evaluate
from .losses import LossBreakdown, LossWeights, total_loss
from .mapper import StyleMapper, init_mapper, map_edit
from .prompt import Attribute, PromptBank, StyleTokenTable, init_style_tokens
from .trainer import TrainConfig, TrainState, train, train_attribute_set, train_step

__version__ = "0.1.0"
