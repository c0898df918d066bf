"""B-cos backbones with a similarity-based, support-vector classification head."""

from .bcos import BCosConv2d, BCosLinear, BCosNetwork, default_backbone, encode_image, extract_summary
from .head import HeadConfig, SICModel, SupportSet
from .tensor import Tensor, no_grad

__all__ = [
    "BCosConv2d",
    "BCosLinear",
    "BCosNetwork",
    "HeadConfig",
    "SICModel",
    "SupportSet",
    "Tensor",
    "default_backbone",
    "encode_image",
    "extract_summary",
    "no_grad",
]
