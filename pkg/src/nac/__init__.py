"""Neuronal attention circuits: ODE-defined attention logits over sparse NCP wiring."""
from nac.attention import NACConfig, NACLayer, NACParams, nac_forward
from nac.kernels import BACKEND
from nac.tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "NACConfig", "NACLayer", "NACParams", "Tape", "Tensor", "backward",
           "nac_forward", "no_grad"]
