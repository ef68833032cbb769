"""BSDEs with jumps, convex risk measures and their optimal-control applications."""
from ._backend import BACKEND
from .market import (JumpAtom, MarketModel, PathEnsemble, Scenario, girsanov_density,
                     relative_entropy, simulate, stochastic_exponential)

__version__ = "0.1.0"
