"""Ultra-lightweight multi-kernel U-shaped segmentation networks.

A self-contained engine: rank-4 tensors with reverse-mode autodiff, the
multi-kernel inverted-residual block family with channel/spatial/gated
attention, five published size variants, analytic parameter/MAC
accounting, a binary-segmentation training loop and bit-exact checkpoint
persistence.
"""

from .blocks import (BlockHyper, ChannelAttention, GroupedAttentionGate,
                     MultiKernelDepthwiseConv, MultiKernelInvertedResidual,
                     MultiKernelInvertedResidualAttention, SegmentationHead)
from .complexity import ComplexityReport, count_macs, count_params, report_render
from .modelio import (dataset_scan, load_checkpoint, load_dataset, read_image,
                      save_checkpoint, write_mask)
from .network import (Network, SegOutputs, VariantConfig, build_network, forward,
                      preset)
from .tensor import (Tensor4, backward, elementwise, finite_diff_check, no_grad,
                     tensor_create)
from .training import (AdamWState, Sample, TrainConfig, adamw_step, clip_gradients,
                       dice_score, evaluate, hybrid_loss, multi_scale_batch,
                       synth_dataset, train_loop)

__all__ = [
    "AdamWState", "BlockHyper", "ChannelAttention", "ComplexityReport",
    "GroupedAttentionGate", "MultiKernelDepthwiseConv",
    "MultiKernelInvertedResidual", "MultiKernelInvertedResidualAttention",
    "Network", "Sample", "SegOutputs", "SegmentationHead", "Tensor4",
    "TrainConfig", "VariantConfig", "adamw_step", "backward", "build_network",
    "clip_gradients", "count_macs", "count_params", "dataset_scan", "dice_score",
    "elementwise", "evaluate", "finite_diff_check", "forward", "hybrid_loss",
    "load_checkpoint", "load_dataset", "multi_scale_batch", "no_grad", "preset",
    "read_image", "report_render", "save_checkpoint", "synth_dataset",
    "tensor_create", "train_loop", "write_mask",
]

__version__ = "0.1.0"
