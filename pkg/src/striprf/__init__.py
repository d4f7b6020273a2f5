"""Strip receptive-field detection blocks on a self-checking numpy autodiff core."""

from .blocks import LskaParams, SpmParams, lska_forward, spm_forward
from .gradcheck import GradCheckResult, gradcheck
from .metrics import (Detection, GroundTruthObject, MetricsReport,
                      average_precision, decode, iou, map_suite, match, nms,
                      precision_recall_f1)
from .model import (DySampleParams, ModelConfig, ModelGraph, build_model,
                    dysample_forward, forward, init_params, named_params,
                    param_store)
from .srfm import (C3k2SrfmParams, SrfmParams, SrfmSubBlock, c3k2_srfm_forward,
                   srfm_forward, srfm_subblock_forward)
from .tensor import (ConvSpec, ShapeError, Tape, Tensor, activation, add,
                     avg_pool, backward, broadcast_expand, concat_channels,
                     conv2d, conv_spec, grid_sample_bilinear, hadamard,
                     max_pool, pad2d, pixel_shuffle, relu, sigmoid,
                     slice_channels, sum_all, upsample_nearest)

__version__ = "0.1.0"
