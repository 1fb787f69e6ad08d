"""Synthetic multi-site MR simulation and unsupervised cross-site harmonization."""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .phantom import (
    Phantom, SiteConfig, ImageSlice, Dataset, generate_phantom, render_image,
    wm_peak_normalize, make_dataset, default_roster, save_dataset, load_dataset,
)
from .networks import (
    HarmonizationModel, BetaMap, ThetaCode, beta_encode, theta_encode,
    decode, discriminate_beta, save_checkpoint, load_checkpoint, CheckpointError,
)
from .training import (
    TrainConfig, LossReport, TrainingDiverged, kl_standard_normal,
    shuffle_betas, perceptual_proxy, compute_losses, discriminator_step, train,
)
from .harmonize import (
    SiteThetaProfile, AdaptationConfig, site_theta, harmonize, adapt_to_new_site,
)
from .metrics import (
    MetricRecord, TestResult, ssim, psnr, wilcoxon_signed_rank,
    histogram_match, silhouette, evaluate_harmonization,
)
