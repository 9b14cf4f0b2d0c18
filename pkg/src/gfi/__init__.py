"""Growth-fragmentation-isolation branching process on random recursive trees.

Simulation at tree and size resolution, first-moment spectral numerics
(Malthusian exponent, Perron eigenvectors, critical curve), Monte Carlo
estimators and monotone couplings of the modified process.
"""

__version__ = "0.1.0"

from .params import Params, ValidationError, ResourceCapError

__all__ = ["Params", "ValidationError", "ResourceCapError", "__version__"]
