"""Scribble-supervised segmentation with a query-guided multi-axis
attention U-Net, an edge enhancement branch and a dual prediction head."""

from .backbone import (BackboneConfig, FeaturePyramid, FullAttention2d,
                       GrayProjection, MaxViTEncoder, tally_attention_scores)
from .data import (ImageSample, SplitSpec, augment, load_dataset, make_splits,
                   save_dataset, synth_edge, synth_scribble,
                   synth_shapes_dataset)
from .decoder import DecoderConfig, MaxViTDecoder
from .edge import EdgeEnhancement, EdgeOutputs, QueryEnhancer
from .errors import ConfigError, DataError, NumericError
from .losses import (LossWeights, ScribbleMap, dice_loss, esl_loss,
                     mix_pseudo_label, partial_ce, psl_loss, ssl_loss,
                     total_loss)
from .metrics import MetricReport, aggregate, compute_report, dsc, hd95
from .model import DualPrediction, ModelConfig, QMaxSeg
from .query_decoder import PyramidPoolingFPN, QueryMaskHead, TwoWayRefiner
from .training import (EpochRecord, FitResult, TrainConfig, evaluate_model,
                       fit, load_fit_checkpoint, lr_at, save_fit_checkpoint,
                       train_step)

__version__ = "0.1.0"
