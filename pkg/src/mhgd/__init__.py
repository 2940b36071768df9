"""Multi-head graph distillation on a small numpy autodiff engine.

A frozen teacher's sensed feature maps are compressed by truncated SVD, a
multi-head attention network learns batch-relation graphs from them, and a
student is trained to reproduce those graphs alongside its own task loss.
"""

from .attention import (
    PLAIN,
    SMOOTHED,
    AttentionGraph,
    MhgdStack,
    attention_graph,
    attention_similarity,
    estimator_forward,
    mhan_loss,
    mhgd_graphs,
    transfer_loss,
)
from .checkpoint import Checkpoint, CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import AugmentConfig, LabeledImageSet, augment_batch, generate_synthetic, load_cifar_binary
from .networks import NetworkSpec, build_network, feature_l2_loss, forward_with_sensing, soft_logits_loss
from .optim import LrSchedule, OptimizerState, lr_at_epoch, sgd_nesterov_step
from .svd import (
    DegenerateRankError,
    FeatureVectorSet,
    compress_feature_map,
    jacobi_eigh,
    truncated_svd,
)
from .tensor import (
    ContractError,
    DimensionError,
    NumericalError,
    Tensor,
    backprop,
    checked,
    no_grad,
    precision,
)
from .training import (
    RunMetrics,
    TrainHyper,
    TrainingAborted,
    TransferSettings,
    evaluate,
    train_mhan,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"
