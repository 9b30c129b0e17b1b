"""Spatio-temporal self-similarity (STSS) blocks on plain numpy arrays."""

from .autodiff import Tape, Var, backward, gradcheck
from .backbone import TinyNetConfig, forward, init_net, temporal_shift
from .extraction import ConvHead, MlpHead, SoftArgmaxHead, conv_extract, mlp_extract, soft_argmax
from .integration import IntegrationConfig, SelfyConfig, init_selfy, integrate_st, project_and_activate, selfy_block_forward
from .stss import OffsetWindow, StssTensor, cosine_sim, spatial_self_similarity, stss_transform, stss_transform_tiled

__version__ = "0.1.0"

__all__ = [
    "ConvHead",
    "IntegrationConfig",
    "MlpHead",
    "OffsetWindow",
    "SelfyConfig",
    "SoftArgmaxHead",
    "StssTensor",
    "Tape",
    "TinyNetConfig",
    "Var",
    "backward",
    "conv_extract",
    "cosine_sim",
    "forward",
    "gradcheck",
    "init_net",
    "init_selfy",
    "integrate_st",
    "mlp_extract",
    "project_and_activate",
    "selfy_block_forward",
    "soft_argmax",
    "spatial_self_similarity",
    "stss_transform",
    "stss_transform_tiled",
    "temporal_shift",
]
