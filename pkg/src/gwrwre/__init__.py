"""Random walks in random environments on Galton-Watson trees.

Simulation, exact ray formulas, large-deviation tools and regime criteria for
walks whose edge weights follow an i.i.d. or Markov environment along rays,
including walks whose weights are reinforced on first visit.
"""

__version__ = "0.1.0"

from .environment import (  # noqa: E402
    DiscreteLaw,
    EnvState,
    FiniteMatrixKernel,
    IIDKernel,
    SamplerKernel,
    TruncationWindow,
)
from .gw_tree import LazyTree, OffspringLaw  # noqa: E402
from .ray_analysis import RayWeights, hit_prob_exact  # noqa: E402
from .walk import ReinforcedParams, WalkEnvironment, escape_trials  # noqa: E402

__all__ = [
    "DiscreteLaw", "EnvState", "FiniteMatrixKernel", "IIDKernel", "SamplerKernel", "TruncationWindow",
    "LazyTree", "OffspringLaw", "RayWeights", "hit_prob_exact", "ReinforcedParams", "WalkEnvironment",
    "escape_trials", "__version__",
]
