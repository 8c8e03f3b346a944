"""Signed distance classifiers built from unitary-gradient neural networks."""
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .estimator import UGNNClassifier
from .layers import (CayleyConv, GnpActivation, GnpMaxPool, OrthoLinear, PixelUnshuffle,
                     bjorck_project)
from .model import (CertificationReport, MlpModel, RingModel, UgnnConfig, UgnnModel, build,
                    build_mlp, certify, closest_adversarial, margin, predict)
from .training import TrainConfig, train
from .upd import UpdBounded, UpdUnbounded, psi, upd_project
from .verification import (check_gnp, check_unitary_gradient, lb_map_report, map_oracle_grid2d,
                           map_oracle_penalty, robustness_curve, verify_model)

__version__ = "0.1.0"
