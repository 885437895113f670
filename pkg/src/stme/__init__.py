"""Spatial-temporal motion tokenization, masked generation, and evaluation."""

from .generation import (EditConstraint, GenerationSchedule, cfg_combine,
                         edit_motion, generate_motion, iterative_decode,
                         predict_residual_layers)
from .masking import MaskPlan, corrupt, mask_ratio, spatial_mask, temporal_mask
from .metrics import (FeatureExtractor, FeatureSet, diversity, evaluate, fid,
                      mm_dist, r_precision)
from .motion import (ConditionEmbedding, LabelTableProvider, MotionGrid,
                     flatten_grid, mpjpe, read_mgrid, regroup_flat,
                     synth_motion, write_mgrid)
from .tensor import Tensor, no_grad
from .transformer import (MaskTransformer, ResidualTransformer,
                          TransformerConfig, mask_loss, pos_encode_2d)
from .vqvae import (Codebook, JointVqVae, PoseVqVae, VqConfig, codebook_reset,
                    ema_update, quantize_nearest, residual_quantize, vq_loss)

__version__ = "0.1.0"
