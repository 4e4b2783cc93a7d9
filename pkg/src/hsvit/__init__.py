"""Horizontally scalable hybrid CNN-transformer engine.

The package splits into five layers: a float64 autodiff tensor core, the
neural building blocks (conv blocks, grouped self-attention, AdamW), the
model itself, a simulated multi-worker executor whose only cross-worker
traffic is group summary vectors, and analytic plus simulated models of
accelerator idle time under different parallelization strategies.
"""

from .tensor import (
    ConvKernel,
    Tensor,
    add,
    concat,
    conv2d,
    extract_patches,
    layer_norm,
    load_tensor,
    log_softmax,
    matmul,
    maxpool2d,
    mean0,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    reshape,
    save_tensor,
    scale,
    softmax,
    sub,
    tensor_from_bytes,
    tensor_sum,
    tensor_to_bytes,
    transpose,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    FormatError,
    HsvitError,
    NumericsError,
    ProtocolError,
    ShapeError,
    UsageError,
)
from .blocks import (
    AdamW,
    ConvBlock,
    LayerNorm,
    Linear,
    MHSABlock,
    adamw_step,
    cosine_lr,
    cross_entropy,
    make_conv_kernel,
)
from .model import (
    HSViTModel,
    ModelConfig,
    aggregate_predict,
    checkpoint_digest,
    load_checkpoint,
    partition_groups,
    save_checkpoint,
    variant_config,
)
from .executor import (
    CONCURRENT,
    SEQUENTIAL_SIM,
    DistributedExecutor,
    ExecutionMode,
    WorkerMessage,
    distributed_forward,
    distributed_train_step,
    expected_step_bytes,
    plan_partition,
)
from .analytics import (
    HSVIT,
    MP,
    PP,
    CostModel,
    Timeline,
    closed_form_itr,
    itr_hsvit,
    itr_hsvit_simulated,
    itr_mp,
    itr_pp,
    measured_itr,
    render_timeline,
    simulate_timeline,
    timeline_to_csv,
)
from .data import Dataset, load_idx, make_synthetic
from .training import RunConfig, TrainReport, build_dataset, evaluate, load_run_config, train

__version__ = "0.1.0"
