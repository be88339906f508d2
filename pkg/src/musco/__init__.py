"""Iterative neural-network compression by low-rank tensor factorization.

The package factorizes convolutional kernels (Tucker-2 over the channel
modes, or CP of the spatially reshaped kernel) and fully connected weights
(SVD), replaces each original layer with the equivalent short sequence of
smaller layers, and alternates further rank reduction with fine-tuning.
Ranks are chosen automatically, either by empirical variational Bayesian
rank estimation with a weakening factor or from a constant per-step
parameter-reduction target.
"""

from .decomp import (
    AlsOptions,
    CPFactors,
    MultilinearRank2,
    SVDFactors,
    Tucker2Factors,
    cpd3_decompose,
    cpd3_reconstruct,
    cpd3_recompress,
    svd_decompose,
    svd_recompress,
    tucker2_decompose,
    tucker2_reconstruct,
    tucker2_recompress,
)
from .driver import CompressionReport, MuscoConfig, check_stop, musco_run, one_iteration
from .linalg import SVDResult, khatri_rao, solve_least_squares, svd, truncated_svd
from .modelgraph import (
    DecomposedGroup,
    LayerSpec,
    ModelGraph,
    conv2d,
    count_flops,
    count_params,
    extract_group_factors,
    fc,
    flatten,
    grouped_conv2d,
    infer_shapes,
    maxpool2d,
    relu,
    sequential,
    softmax_xent_head,
    substitute_conv_cpd3,
    substitute_conv_tucker2,
    substitute_fc_svd,
    update_group_weights,
)
from .rank_select import (
    EVBMFEstimate,
    LayerState,
    RankStrategy,
    cpd3_rate_rank,
    evbmf_rank,
    select_ranks,
    tucker2_rate_rank,
    weakened_rank,
)
from .serialize import gen_synthetic, load_dataset, load_idx, load_model, save_model
from .tensor import fold, mode_product, rel_error, reshape_kernel, restore_kernel, unfold
from .trainer import (
    Batch,
    TrainConfig,
    TrainHistory,
    evaluate,
    fine_tune,
    forward,
    loss_and_grad,
    sgd_step,
)

__version__ = "0.1.0"
