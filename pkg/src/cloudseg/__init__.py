"""Cloud segmentation toolkit for 4-band (R, G, B, NIR) satellite imagery.

From-scratch numpy implementation of an encoder-decoder segmentation CNN
(inverted residual units + atrous separable convolutions + ASPP), its Adam
training loop, and whole-scene sliding-window inference with max-merged
overlaps. See the `cloudseg` CLI for the end-to-end pipeline.
"""

from .autodiff import Tensor, no_grad
from .blocks import ArchitectureConfig, BlockSpec, parse_architecture
from .data import DatasetSplit, PatchSet, augment_patch, load_patch_corpus, split_dataset
from .errors import (
    ConfigError,
    FormatError,
    GenerationError,
    RangeError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .gradcheck import grad_check
from .metrics import ConfusionMatrix, MetricsRow, compute_metrics, confusion, emit_report, evaluate_split
from .network import (
    Network,
    build_network,
    count_params,
    forward,
    load_architecture,
    load_network,
    packaged_config,
    read_weights,
    save_network,
    write_weights,
)
from .raster import Patch, RasterScene, extract_patch, normalize_reflectance, read_msr, write_msr
from .synth import SynthConfig, generate_corpus, generate_scene
from .tiling import ProbabilityCanvas, WindowPlan, merge_window, plan_windows, segment_scene
from .training import (
    AdamState,
    OptimizerConfig,
    adam_step,
    bce_loss,
    init_adam,
    pixel_accuracy,
    train,
)

__version__ = "0.1.0"
