"""Walker metrics: Einstein residuals, coordinate flows and a worked catalog.

Submodules
----------
jets       truncated multivariate Taylor arithmetic (exact derivatives)
exprlang   small expression language used in metric-spec files
geometry   Christoffel symbols and curvature of coordinate metrics
walker     Walker metric data, residual systems and the null-frame decomposition
transform  characteristic flows, x+ shifts, gauge maps and the H0 solver
catalog    named examples and auxiliary Einstein fixtures
cli        the ``walkerlab`` command
"""

__version__ = "0.1.0"

from . import jets, exprlang, geometry, walker, transform, catalog  # noqa: E402
from .walker import Box, WalkerMetric, einstein_residual, extract_profile  # noqa: E402
from .transform import kill_A, main_theorem_flow, plus_shift, theorem2_phi  # noqa: E402
from .catalog import named_example, EXAMPLE_NAMES  # noqa: E402

__all__ = [
    "jets", "exprlang", "geometry", "walker", "transform", "catalog",
    "Box", "WalkerMetric", "einstein_residual", "extract_profile",
    "kill_A", "main_theorem_flow", "plus_shift", "theorem2_phi",
    "named_example", "EXAMPLE_NAMES", "__version__",
]
