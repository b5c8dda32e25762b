"""Frequency-modulated restoration for pooled visual-token pyramids.

Public surface: dense float64 tensor primitives and the FMT1 file format
(:mod:`fmvr.tensor_core`), the restoration block with analytic gradients
(:mod:`fmvr.restoration`), nested token pyramids (:mod:`fmvr.matryoshka`),
the multi-scale training loop and synthetic task (:mod:`fmvr.mrl_train`),
and the prefill cost model (:mod:`fmvr.flops`).
"""

from .tensor_core import (
    DimensionError,
    Fmt1Error,
    InvalidConfig,
    ShapeMismatch,
    add,
    block_avg_pool,
    block_max_pool,
    block_max_pool_with_index,
    broadcast_mul,
    mul,
    read_fmt1,
    sub,
    upsample_replicate,
    write_fmt1,
)
from .restoration import (
    FmvrActivations,
    FmvrParams,
    OddDimension,
    avg_decompose,
    avg_unit_forward,
    fmvr_backward,
    fmvr_forward,
    init_fmvr_params,
    max_decompose,
    max_unit_forward,
)
from .matryoshka import (
    SAMPLING_STRATEGIES,
    PyramidConfig,
    PyramidLevel,
    TokenPyramid,
    build_pyramid,
    downsample,
    downsample_adjoint,
    flatten_tokens,
    level_window,
    pyramid_sides,
    unflatten_tokens,
)
from .mrl_train import (
    MrlModel,
    ScaleHead,
    SyntheticDataset,
    backward_and_step,
    compute_gradients,
    evaluate,
    forward_loss,
    generate_dataset,
    load_model,
    make_model,
    save_model,
    train,
)
from .flops import (
    DEFAULT_TEXT_TOKENS,
    PREFILL_CALIBRATION_TB,
    CostModelConfig,
    CostReport,
    calibrate_text_tokens,
    fmvr_flop_count,
    fmvr_flops,
    llm_prefill_flops,
    report,
)

__version__ = "0.1.0"
