"""Semi-supervised segmentation by co-training a conv branch and an
attention branch with cross pseudo supervision and a class-balanced,
multi-scale local contrastive loss, evaluated on a synthetic benchmark."""

__version__ = "0.1.0"
