"""Model-based clustering of ball possessions.

Each possession is a marked point process: event types follow an absorbing
Markov chain, inter-event times a conditional gamma process, and locations a
Brownian walk truncated to the pitch. A finite mixture of such processes is
fitted by generalized EM.
"""

from .core import ClusterIndicators, EventRecord, MixtureParams, PitchBounds, Possession, deserialize_params, serialize_params
from .densities import mixture_loglik
from .evaluate import adjusted_rand_index, indicator_error
from .gem import FitConfig, FitResult, fit, select_k
from .indicators import indicators_for
from .simulate import generate_dataset, scenario_params

__all__ = [
    "ClusterIndicators",
    "EventRecord",
    "FitConfig",
    "FitResult",
    "MixtureParams",
    "PitchBounds",
    "Possession",
    "adjusted_rand_index",
    "deserialize_params",
    "fit",
    "generate_dataset",
    "indicator_error",
    "indicators_for",
    "mixture_loglik",
    "scenario_params",
    "select_k",
    "serialize_params",
]
__version__ = "0.1.0"
