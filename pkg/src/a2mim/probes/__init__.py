"""Analysis probes: occlusion robustness, patch interactions and feature spectra."""

from .interaction import (
    DEFAULT_ORDER_FRACTIONS, InteractionEstimate, InteractionReport, interaction_strength,
    interaction_strength_distribution, masked_model_output_f, model_set_function, multiorder_interaction,
)
from .occlusion import OcclusionReport, occlusion_curve, salient_patch_ranking
from .spectrum import (
    SpectrumProfile, delta_log_amplitude, feature_variance, radial_amplitude, spectrum_and_variance_profile,
)

__all__ = [
    "DEFAULT_ORDER_FRACTIONS", "InteractionEstimate", "InteractionReport", "interaction_strength",
    "interaction_strength_distribution", "masked_model_output_f", "model_set_function",
    "multiorder_interaction", "OcclusionReport", "occlusion_curve", "salient_patch_ranking",
    "SpectrumProfile", "delta_log_amplitude", "feature_variance", "radial_amplitude",
    "spectrum_and_variance_profile",
]
