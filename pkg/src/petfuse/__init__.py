"""PET/CT lesion segmentation inference engine with multi-fold STAPLE fusion."""

__version__ = "0.1.0"
