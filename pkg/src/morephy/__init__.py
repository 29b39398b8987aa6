"""Physics-informed operator learning with multi-objective evolution and
replica-exchange Langevin sampling."""

from morephy.diffkit import AdamState, Jet2, ParamVector, adam_step, grad_params, input_jet2
from morephy.opnet import OperatorModel, OperatorSpec, init_model, predict, predict_grid
from morephy.physics import Burgers, LossWeights, ObjectiveVector, Tfmdwe, composite_loss, make_problem

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Burgers",
    "Jet2",
    "LossWeights",
    "ObjectiveVector",
    "OperatorModel",
    "OperatorSpec",
    "ParamVector",
    "Tfmdwe",
    "adam_step",
    "composite_loss",
    "grad_params",
    "init_model",
    "input_jet2",
    "make_problem",
    "predict",
    "predict_grid",
]
