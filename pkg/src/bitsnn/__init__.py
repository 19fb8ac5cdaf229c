"""Bit-serial ANN-to-SNN conversion toolkit."""

__version__ = "0.1.0"

from .ann import AnnModel, ConvBnBlock, QcfsActivation, ann_forward, build_model, qcfs_forward
from .convert import SnnModel, convert, shift_bn_bias, verify_lossless
from .snn import fire_baseline, fire_modified, run_snn

__all__ = [
    "AnnModel", "ConvBnBlock", "QcfsActivation", "SnnModel",
    "ann_forward", "build_model", "convert", "fire_baseline", "fire_modified",
    "qcfs_forward", "run_snn", "shift_bn_bias", "verify_lossless",
]
