"""Few-shot cross-domain image classification via per-channel feature transforms.

A source-trained residual classifier is adapted to a new domain by
freezing its backbone and training only lightweight channel-affine
transforms plus a fresh head on a handful of labeled examples. The
package ships its own reverse-mode autodiff over numpy tensors, a
synthetic domain-shift benchmark, a land-cover mapping pipeline built
on superpixel voting, and a CLI covering the full workflow.
"""

from .autograd import (
    BNState,
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    channel_affine,
    conv2d,
    global_avg_pool,
    grad_check,
    linear,
    mul,
    relu,
    softmax_cross_entropy,
    softmax_probs,
    tsum,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    TEST,
    TRAIN,
    VAL,
    LabeledDataset,
    PatchGrid,
    SyntheticShiftConfig,
    fast_shift_config,
    load_folder_dataset,
    save_folder_dataset,
    synth_domain_pair,
    synth_mosaic,
    tile_image,
)
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FtmnetError,
    InsufficientDataError,
    NumericError,
    TaxonomyError,
)
from .ftm import FTMParams, ftm_apply, ftm_init
from .mapping import (
    LandCoverMap,
    Segmentation,
    build_land_cover_map,
    classify_patches,
    fine_to_coarse,
    label_superpixels,
    render_map,
    score_map,
    slic_segment,
)
from .metrics import ConfusionMatrix, cm_scores, cm_to_csv
from .network import (
    ModelState,
    NetworkConfig,
    build_model,
    desk_config,
    forward_model,
    partition_checksum,
    partition_params,
    reinit_head,
    resnet34_config,
)
from .training import (
    AdamState,
    Episode,
    StageConfig,
    adam_step,
    adapt_ftm,
    evaluate,
    finetune_baseline,
    lr_at,
    run_shot_sweep,
    sample_shots,
    stage1_defaults,
    stage2_ft_defaults,
    stage2_ftm_defaults,
    train_source,
)

__version__ = "0.1.0"
