from .autodiff import (
    ContractError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    parameter,
)
from .gaussian import (
    GaussianDiag,
    gaussian_log_density,
    kl_diag_gaussians,
    positive,
    reparameterize,
)
from .layers import DenseLayer, DropoutSpec, LstmCell, dense_forward, dropout, lstm_step
from .optim import Adam

__all__ = [
    "Adam",
    "ContractError",
    "DenseLayer",
    "DomainError",
    "DropoutSpec",
    "GaussianDiag",
    "LstmCell",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "dense_forward",
    "dropout",
    "gaussian_log_density",
    "kl_diag_gaussians",
    "lstm_step",
    "parameter",
    "positive",
    "reparameterize",
]
