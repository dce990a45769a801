"""Attention-guided knowledge distillation with representative teacher keys.

The package is self-contained on top of numpy: a reverse-mode autograd core
(`tensor`, `nn_ops`), small residual backbones with feature taps (`models`),
the teacher-student attention and selection machinery (`attention`), the
distillation objective (`losses`), dataset plumbing (`data`), metrics, and a
two-stage training harness with a CLI (`train`, `cli`).
"""

from .attention import (
    AttentionMatrix,
    AttentionParams,
    RTKConfig,
    RTKSelection,
    attention_columns,
    attention_logits,
    compute_attention,
    compute_keys,
    compute_queries,
    impact_scores,
    select_rtk,
)
from .data import AugmentConfig, Sample, augment, batches, load_cifar10_binary, synth_dataset
from .losses import (
    LossConfig,
    channel_pool_l2norm,
    cross_entropy_loss,
    kl_soft_loss,
    resample_to,
    rtk_loss,
    soften,
    softpool2d,
    total_loss,
)
from .metrics import accuracy, roc_auc
from .models import BackboneConfig, Backbone, FeatureSet, build_backbone, forward_with_taps, load_backbone
from .tensor import Parameter, Tensor
from .train import (
    RunArtifacts,
    TrainerConfig,
    desk_profile,
    evaluate_accuracy,
    paper_profile,
    train_student_rtk,
    train_teacher,
)

__version__ = "0.1.0"
