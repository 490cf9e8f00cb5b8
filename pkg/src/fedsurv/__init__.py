"""Federated discrete-time survival learning with differential-privacy accounting."""

from fedsurv.grid import (
    DiscretizedTarget,
    InvalidRecordError,
    SurvivalRecord,
    TimeGrid,
    discretize,
)
from fedsurv.network import (
    HazardNetwork,
    batch_gradient,
    nll_loss,
    per_sample_gradients,
    survival_curve,
)
from fedsurv.privacy import (
    BdpConfig,
    BdpLedger,
    CalibrationError,
    DpConfig,
    PrivacySpend,
    RdpLedger,
    bdp_finalize,
    bdp_step_cost,
    calibrate_sigma,
    clip_gradient,
    mc_sensitivity,
    rdp_to_dp,
    sanitize_batch,
    subsampled_gaussian_rdp,
)

__version__ = "0.1.0"

__all__ = [
    "TimeGrid",
    "SurvivalRecord",
    "DiscretizedTarget",
    "InvalidRecordError",
    "discretize",
    "HazardNetwork",
    "nll_loss",
    "per_sample_gradients",
    "batch_gradient",
    "survival_curve",
    "DpConfig",
    "BdpConfig",
    "PrivacySpend",
    "RdpLedger",
    "BdpLedger",
    "CalibrationError",
    "clip_gradient",
    "sanitize_batch",
    "subsampled_gaussian_rdp",
    "rdp_to_dp",
    "calibrate_sigma",
    "mc_sensitivity",
    "bdp_step_cost",
    "bdp_finalize",
]
