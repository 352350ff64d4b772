"""Dilated multi-scale segmentation toolkit.

A self-contained implementation of an encoder/decoder vessel-segmentation
network and all of its numeric building blocks: a small reverse-mode
autodiff engine over 4-D tensors, the convolution operator family
(dilated, depthwise-separable, transposed, pooling, bilinear resampling),
receptive-field and sampling-coverage analysis, the training objective and
optimizer, evaluation metrics with ROC/PR curves, and a CLI for desk-scale
experiments on synthetic data.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DnetError,
    GraphError,
    ManifestError,
    PnmError,
    ShapeError,
)
from .tensor import (
    Graph,
    Tensor,
    backward,
    concat_channels,
    default_dtype,
    elementwise_add,
    multiply,
    recording,
    relu,
    scale,
    set_default_dtype,
    sigmoid,
    slice_channels,
    sum_all,
    tensor,
    using_dtype,
    zeros,
)
from .convops import (
    ConvKernel,
    batch_norm,
    bilinear_upsample,
    conv2d,
    depthwise_conv2d,
    depthwise_separable_conv,
    deterministic_mode,
    dilated_kernel_extent,
    global_avg_pool,
    max_pool,
    same_pads,
    set_deterministic,
    transposed_conv,
    using_deterministic,
)
from .receptive import (
    CoverageReport,
    LayerSpec,
    RFReport,
    coverage_map,
    network_rf,
    rf_single,
    rf_stack,
)
from .losses import LossConfig, bce_mean, mse_mean, sumsq, total_loss
from .metrics import ConfusionCounts, CurveReport, MetricsReport, confusion, metrics, roc_pr_curves
from .model import (
    DNet,
    DNetConfig,
    Decoder,
    Encoder,
    MSIF,
    ResidualBottleneck,
    build_encoder,
    encoder_concat,
    encoder_layer_specs,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate,
    poly_lr,
    predict_probs,
    save_loss_trace,
    synth_vessels,
    train,
)

__version__ = "0.1.0"
