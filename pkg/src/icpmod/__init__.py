"""Two-layer learning-based control sandbox for ICP waveform modulation.

A tracking layer (offset-free MPC with a beat-periodic disturbance memory)
drives a simulated actuation motor against a balloon/brain-phantom pressure
bench, and a learning layer (GP-based Bayesian optimization) shapes the
reference pulse so the measured pressure pulse amplitude hits a target
while the mean pressure stays put.
"""

__version__ = "0.1.0"

from .model import AugmentedModel, Constraints, IdentificationError, LtiModel, augment, identify_lti

__all__ = [
    "AugmentedModel",
    "Constraints",
    "IdentificationError",
    "LtiModel",
    "augment",
    "identify_lti",
    "__version__",
]
