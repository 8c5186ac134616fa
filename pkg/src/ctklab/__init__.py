"""Scale-invariant curvature analysis for small fully-connected networks.

Connectivity tangent kernels, scale transformations, PAC-Bayes bounds,
Laplace-family posteriors and the calibration / correlation metrics used
to evaluate them, plus a CLI harness for end-to-end experiments.
"""

from ctklab.backend import backend_name

__all__ = ["backend_name"]
__version__ = "0.1.0"
