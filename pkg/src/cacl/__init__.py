"""Class-aware codebook learning (CaCL) for weakly supervised segmentation of diffuse stains."""

__version__ = "0.1.0"
