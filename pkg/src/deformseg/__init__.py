"""deformseg: dual-branch deformable-fusion semantic segmentation, built on
a from-scratch numpy autodiff engine and verified against independent
oracles (finite differences, brute-force transforms, discrete Jaccard).
"""

from . import data, losses, metrics, ops, optim
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .config import ConfigBundle, ModelConfig, SceneConfig, TrainConfig
from .deform import bilinear_sample, deform_conv2d, offset_mask_predict
from .errors import ConfigError, DataError, NumericalError
from .fusion import ChannelAttention, DeformBlock, ScaleFusionBlock
from .losses import (composite_loss, dice_loss, distance_transform, focal_loss,
                     lovasz_softmax, surface_loss)
from .metrics import ConfusionMatrix, class_report, iou_per_class, miou, retention
from .model import (FileFeatureProvider, FrozenRandomProvider, LocalBackbone,
                    SegModel)
from .optim import AdamW, cosine_lr
from .tensor import (Tensor, backward, default_dtype, no_grad,
                     set_debug_checks, set_default_dtype, using_dtype)
from .harness import (RunLog, evaluate_checkpoint, evaluate_model,
                    majority_baseline_miou, retention_run, sensitivity_sweep,
                    train)

__version__ = "0.1.0"
