"""Joint modelling of longitudinal signals and event times.

A multivariate Gaussian convolution process (MGCP) describes the signals of
all units; a Cox model with an exponential baseline hazard links the latent
signal to the event times. Inference maximises a sparse variational bound
with pseudo-inputs on the latent functions.
"""

import jax

# Every numerical routine in the package assumes double precision.
jax.config.update("jax_enable_x64", True)

from mgcp_cox.errors import NumericalError, ValidationError  # noqa: E402

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "__version__"]
