"""Dynamic adversarial contrastive pretraining with a scheduled augmentation
strength, plus the pseudo-label post-processing stage and evaluation tools."""
from .attack import AttackSpec, accuracies, pgd, robust_accuracy
from .augment import AugmentationPolicy, ImageBatch, augment_batch, augment_views
from .diagnostics import MmdConfig, min_classwise_distance, mmd_rbf, sweep
from .encoder import DualBranchEncoder, EncoderConfig, MomentumState, frozen_stats, momentum_update
from .errors import ConfigError, ContractError, DataError, DynaclError, NumericError
from .evaluate import EvalProtocolConfig, finetune, report
from .objectives import ObjectiveConfig, batch_nce, dynacl_loss, info_nce, trades_loss
from .postprocess import Classifier, kmeans, lp_aft
from .pretrain import PretrainConfig, Trainer, pretrain, resume
from .schedule import SchedulePlan, loss_coefficients, strength_at, weight_at

__version__ = "0.1.0"
