"""scikit-learn style classifier wrapping network construction and training."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .network import NetworkSpec, StackSpec, build_network, init_params
from .optim import OptState, TrainConfig, train

__all__ = ["MBANetClassifier"]


class MBANetClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier with a choice of activation per stack.

    ``X`` is ``(n, C, H, W)``, or ``(n, C*H*W)`` together with
    ``input_shape``. Inputs are centred with the per-pixel training mean.
    """

    def __init__(self, stacks=((8,), (16,), (32,)), activation="mba", k=4, fc_widths=(128,),
                 dropout_rate=0.5, init_std=0.05, mba_bias_spread=0.1, base_lr=0.05,
                 momentum=0.9, weight_decay=5e-4, lr_drop_factor=0.1, lr_drop_period=10.0,
                 lr_floor=1e-4, batch_size=100, max_epochs=15, input_shape=None,
                 dtype="float32", random_state=0):
        self.stacks = stacks
        self.activation = activation
        self.k = k
        self.fc_widths = fc_widths
        self.dropout_rate = dropout_rate
        self.init_std = init_std
        self.mba_bias_spread = mba_bias_spread
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_drop_factor = lr_drop_factor
        self.lr_drop_period = lr_drop_period
        self.lr_floor = lr_floor
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.input_shape = input_shape
        self.dtype = dtype
        self.random_state = random_state

    def _images(self, X, fitting):
        if X.ndim == 4:
            shape = X.shape[1:]
        elif X.ndim == 2 and self.input_shape is not None:
            shape = tuple(self.input_shape)
            if int(np.prod(shape)) != X.shape[1]:
                raise ValueError(f"input_shape {shape} does not match {X.shape[1]} features")
        else:
            raise ValueError("X must be (n, C, H, W), or 2-D with input_shape set")
        if not fitting and shape != self.input_shape_:
            raise ValueError(f"X has image shape {shape}, fitted on {self.input_shape_}")
        return X.reshape((len(X),) + shape).astype(np.float64), shape

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        images, self.input_shape_ = self._images(X, True)
        self.mean_ = images.mean(axis=0)
        seed = 0 if self.random_state is None else int(self.random_state)
        spec = NetworkSpec(
            input_shape=self.input_shape_, n_classes=len(self.classes_),
            stacks=tuple(StackSpec(w, self.activation, self.k) for w in self.stacks),
            fc_widths=tuple(self.fc_widths), dropout_rate=self.dropout_rate,
            init_std=self.init_std, mba_bias_spread=self.mba_bias_spread,
        )
        self.network_ = init_params(build_network(spec, np.dtype(self.dtype)), seed)
        cfg = TrainConfig(
            base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
            lr_drop_factor=self.lr_drop_factor, lr_drop_period=self.lr_drop_period,
            lr_floor=self.lr_floor, batch_size=self.batch_size, max_epochs=self.max_epochs,
            seed=seed,
        )
        data = Dataset(images - self.mean_, codes, n_classes=len(self.classes_))
        self.history_ = list(train(self.network_, data, None, cfg))
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        images, _ = self._images(X, False)
        return self.network_.predict_scores((images - self.mean_).astype(self.network_.dtype))

    def predict(self, X):
        scores = self.predict_proba(X)
        return self.classes_[scores.argmax(axis=1)]
