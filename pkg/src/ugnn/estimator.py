"""scikit-learn wrapper around the fully connected UGNN."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor_core as tc
from .model import MlpModel, closest_adversarial, is_robust, margin
from .training import TrainConfig, evaluate, train


class UGNNClassifier(BaseEstimator, ClassifierMixin):
    """Signed distance classifier on tabular features.

    The network keeps the input width for ``depth`` orthogonal layers and ends
    in a UPD head, so ``certified_radius(X)`` is a certified L2 radius in feature units.

    Parameters
    ----------
    depth : int
        Number of hidden orthogonal layers (0 gives an affine model).
    activation : {"maxmin", "oplu", "abs"}
    head : {"auto", "updB", "updU"}
        ``"auto"`` uses the bounded head when the class count allows it.
    margin : float
        Multi-margin loss margin, the radius training pushes for.
    """

    def __init__(self, depth=2, activation="maxmin", head="auto", epochs=100, lr=1e-2,
                 batch_size=64, margin=0.5, milestones=(), precision="f64", random_state=0):
        self.depth = depth
        self.activation = activation
        self.head = head
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.margin = margin
        self.milestones = milestones
        self.precision = precision
        self.random_state = random_state

    def _tensor(self, X) -> torch.Tensor:
        return torch.as_tensor(np.asarray(X, dtype=np.float64)).to(tc.resolve_dtype(self.precision))

    def _validate(self, X) -> torch.Tensor:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} "
                             f"is expecting {self.n_features_in_} features as input")
        return self._tensor(X)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise ValueError("need samples of at least two classes")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        self.n_features_in_ = X.shape[1]
        head = self.head
        if head == "auto":
            head = "updB" if n_classes <= self.n_features_in_ else "updU"
        dims = [self.n_features_in_] * (self.depth + 1)
        self.model_ = MlpModel(dims, n_classes=n_classes, activation=self.activation, head=head,
                               dtype=self.precision, seed=self.random_state)
        config = TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                             margin=self.margin, milestones=list(self.milestones),
                             seed=self.random_state, precision=self.precision)
        self.history_ = train(self.model_, self._tensor(X), torch.as_tensor(y_enc), config)
        return self

    def decision_function(self, X):
        """Logits; for two classes the signed distance ``f_1 - f_0`` to the boundary."""
        X = self._validate(X)
        with torch.no_grad():
            z = self.model_(X).numpy()
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def predict(self, X):
        X = self._validate(X)
        with torch.no_grad():
            idx = self.model_(X).argmax(dim=1).numpy()
        return self.classes_[idx]

    def certified_radius(self, X):
        """Certified L2 radius of each prediction."""
        X = self._validate(X)
        with torch.no_grad():
            _, _, m = margin(self.model_(X))
        return m.numpy()

    def certify(self, X, eps: float):
        return np.array([is_robust(float(m), eps) for m in self.certified_radius(X)])

    def closest_adversarial(self, X):
        """Candidate boundary points ``x - M grad(f_l - f_s)``; NaN rows where undefined."""
        X = self._validate(X)
        x_adv, _ = closest_adversarial(self.model_, X, strict=False)
        return x_adv.numpy()

    def score_margin(self, X, y) -> dict:
        X = self._validate(X)
        y_enc = np.searchsorted(self.classes_, np.asarray(y))
        return evaluate(self.model_, X, torch.as_tensor(y_enc))
