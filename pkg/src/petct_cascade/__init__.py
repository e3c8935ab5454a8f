"""Two-stage cascaded PET/CT lesion segmentation with a stage-2 model ensemble."""

__version__ = "0.1.0"
