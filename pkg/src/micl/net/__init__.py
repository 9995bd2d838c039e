from .model import (
    BN_LAYERS,
    BnLayerStats,
    GradResult,
    ModelConfig,
    ModelParams,
    backward,
    batch_moments,
    copy_stats,
    cross_entropy,
    flatten_params,
    forward,
    init_bn_stats,
    init_params,
    param_count,
    param_layout,
    running_normalizer,
    sample_moments,
    softmax,
    unflatten_params,
)
