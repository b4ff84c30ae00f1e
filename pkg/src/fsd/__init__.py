"""Forensic self-descriptions for zero-shot detection, open-set attribution and
clustering of image sources."""

from .filterbank import FilterBank, TrainConfig, extract_residuals, train_filter_bank
from .selfdesc import FitConfig, SelfDescription, describe_image
from .mixture import GaussianMixture, fit_gmm
from .tasks import attribute, calibrate_detector, detect, fit_attributor, kmeans

__version__ = "0.1.0"
