"""Feed-forward regression surrogate for ZFS tensor components.

One scalar network per independent component of D maps flattened Cartesian
displacements (Angstrom, relative to a reference geometry) to that component
(cm^-1). Hidden layers use a sigmoid, the output is linear, and the loss is
mean-squared error plus an L2 penalty on the weight matrices.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .coupling import SYM_INDEX, Geometry

logger = logging.getLogger(__name__)

MODEL_FORMAT = "SPINPHONON-SURROGATE"
MODEL_VERSION = 1
COMPONENTS = ("xx", "yy", "zz", "xy", "xz", "yz")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_params(layer_dims, rng):
    params = []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        params.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        params.append(np.zeros(n_out))
    return params


def forward(params, X):
    """Network output and the list of layer activations (input included)."""
    acts = [X]
    h = X
    n_layers = len(params) // 2
    for k in range(n_layers):
        z = h @ params[2 * k] + params[2 * k + 1]
        h = sigmoid(z) if k < n_layers - 1 else z
        acts.append(h)
    return h[:, 0], acts


def loss_and_grad(params, X, y, l2_lambda):
    """``mean((f(X) - y)^2) + l2_lambda * sum ||W||^2`` and its gradient by backpropagation."""
    pred, acts = forward(params, X)
    err = pred - y
    loss = float(np.mean(err**2)) + l2_lambda * sum(float(np.sum(W * W)) for W in params[0::2])
    grads = [None] * len(params)
    delta = (2.0 / y.size) * err[:, None]
    n_layers = len(params) // 2
    for k in reversed(range(n_layers)):
        W = params[2 * k]
        grads[2 * k] = acts[k].T @ delta + 2.0 * l2_lambda * W
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            h = acts[k]
            delta = (delta @ W.T) * h * (1.0 - h)
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainingReport:
    train_rmse: float
    validation_rmse: float
    epochs: int
    loss_curve: list = field(default_factory=list)
    validation_curve: list = field(default_factory=list)


class MLPSurrogate(RegressorMixin, BaseEstimator):
    """Sigmoid multilayer perceptron trained with mini-batch Adam.

    Inputs and target are standardized on the training data; ``l2_lambda``
    acts on the standardized problem. Training stops early when the
    validation RMSE has not improved for ``patience`` epochs, keeping the best
    weights. Without validation data the training loss is monitored instead.
    """

    def __init__(self, hidden_layer_sizes=(128, 64, 16), l2_lambda=1e-6, learning_rate=1e-3,
                 batch_size=32, max_epochs=2000, patience=200, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.l2_lambda = l2_lambda
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def _scale_x(self, X):
        return (X - self.x_mean_) / self.x_scale_

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        has_val = X_val is not None
        if has_val:
            X_val, y_val = check_X_y(X_val, y_val, dtype=float, y_numeric=True)
            if X_val.shape[1] != X.shape[1]:
                raise ValueError("validation features do not match training features")
        self.n_features_in_ = X.shape[1]
        self.layer_dims_ = (X.shape[1], *self.hidden_layer_sizes, 1)
        self.x_mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.x_scale_ = np.where(scale > 0, scale, 1.0)
        self.y_mean_ = float(y.mean())
        y_scale = float(y.std())
        rng = np.random.default_rng(self.random_state)
        self.params_ = init_params(self.layer_dims_, rng)
        self.constant_ = y_scale <= 1e-14 * max(1.0, abs(self.y_mean_))
        if self.constant_:
            warnings.warn("constant training target: surrogate returns the constant", UserWarning)
            self.y_scale_ = 1.0
            for p in self.params_:
                p[...] = 0.0
            self.report_ = TrainingReport(0.0, self._rmse(X_val, y_val) if has_val else 0.0, 0)
            return self
        self.y_scale_ = y_scale
        Xs = self._scale_x(X)
        ys = (y - self.y_mean_) / self.y_scale_
        opt = Adam(self.params_, self.learning_rate)
        n = Xs.shape[0]
        batch = min(self.batch_size, n)
        losses, val_curve = [], []
        best = (math.inf, [p.copy() for p in self.params_], 0)
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                _, grads = loss_and_grad(self.params_, Xs[idx], ys[idx], self.l2_lambda)
                opt.step(self.params_, grads)
            loss, _ = loss_and_grad(self.params_, Xs, ys, self.l2_lambda)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            losses.append(loss)
            monitor = loss
            if has_val:
                monitor = self._rmse(X_val, y_val)
                val_curve.append(monitor)
            if monitor < best[0]:
                best = (monitor, [p.copy() for p in self.params_], epoch)
            elif self.patience is not None and epoch - best[2] >= self.patience:
                break
        self.params_ = best[1]
        self.report_ = TrainingReport(self._rmse(X, y), self._rmse(X_val, y_val) if has_val else math.nan,
                                      epoch, losses, val_curve)
        return self

    def _rmse(self, X, y):
        return float(np.sqrt(np.mean((self.predict(X) - y) ** 2)))

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out, _ = forward(self.params_, self._scale_x(X))
        return self.y_mean_ + self.y_scale_ * out

    def weight_norm(self) -> float:
        check_is_fitted(self, "params_")
        return float(math.sqrt(sum(np.sum(W * W) for W in self.params_[0::2])))


def _canonical_order(X, y):
    keys = np.column_stack([X, np.reshape(y, (X.shape[0], -1))])
    return np.lexsort(keys.T[::-1])


def train_surrogate(X, y, n_train=1600, n_val=400, seed=0, **hyper):
    """Split samples into training/validation sets and train one component model.

    Samples are put into a canonical order before the seeded split, so the
    result does not depend on the order they were supplied in.
    """
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    if X.shape[0] < 50:
        raise ValueError("need at least 50 samples")
    if n_train + n_val != X.shape[0]:
        raise ValueError(f"split {n_train}+{n_val} does not match {X.shape[0]} samples")
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    perm = np.random.default_rng(seed).permutation(X.shape[0])
    tr, va = perm[:n_train], perm[n_train:]
    model = MLPSurrogate(random_state=seed, **hyper)
    model.fit(X[tr], y[tr], X[va], y[va])
    return model, model.report_


def tensor_to_components(D):
    D = np.asarray(D, dtype=float)
    return np.stack([D[..., i, j] for i, j in SYM_INDEX], axis=-1)


def components_to_tensor(c):
    c = np.asarray(c, dtype=float)
    D = np.zeros(c.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(SYM_INDEX):
        D[..., i, j] = c[..., k]
        D[..., j, i] = c[..., k]
    return D


class DTensorSurrogate(BaseEstimator):
    """Six component networks assembled into a symmetric D tensor.

    Callable on a :class:`Geometry`, so it can serve as a D-tensor evaluator
    for grid differentiation.
    """

    def __init__(self, reference=None, hidden_layer_sizes=(128, 64, 16), l2_lambda=1e-6,
                 learning_rate=1e-3, batch_size=32, max_epochs=2000, patience=200, random_state=0,
                 n_jobs=1):
        self.reference = reference
        self.hidden_layer_sizes = hidden_layer_sizes
        self.l2_lambda = l2_lambda
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _component(self):
        return MLPSurrogate(self.hidden_layer_sizes, self.l2_lambda, self.learning_rate,
                            self.batch_size, self.max_epochs, self.patience, self.random_state)

    def fit(self, X, Y, n_train=None, n_val=None):
        """``Y`` holds the 6 components (xx yy zz xy xz yz) per row, or (n, 3, 3) tensors."""
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 3:
            Y = tensor_to_components(Y)
        X = check_array(X, dtype=float)
        if Y.shape != (X.shape[0], 6):
            raise ValueError("targets must have 6 components per sample")
        n = X.shape[0]
        n_train = int(round(0.8 * n)) if n_train is None else n_train
        n_val = n - n_train if n_val is None else n_val
        order = _canonical_order(X, Y)
        X, Y = X[order], Y[order]
        perm = np.random.default_rng(self.random_state).permutation(n)
        tr, va = perm[:n_train], perm[n_train:n_train + n_val]

        def train(k):
            model = clone(self._component())
            if va.size:
                return model.fit(X[tr], Y[tr, k], X[va], Y[va, k])
            return model.fit(X[tr], Y[tr, k])

        if self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                self.models_ = list(pool.map(train, range(6)))
        else:
            self.models_ = [train(k) for k in range(6)]
        self.n_features_in_ = X.shape[1]
        self.reports_ = [m.report_ for m in self.models_]
        return self

    def predict(self, X):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} displacement components, got {X.shape[1]}")
        return components_to_tensor(np.column_stack([m.predict(X) for m in self.models_]))

    def predict_D(self, geom: Geometry) -> np.ndarray:
        if self.reference is None:
            raise ValueError("no reference geometry set")
        ref = np.asarray(self.reference.coordinates if isinstance(self.reference, Geometry)
                         else self.reference, dtype=float)
        if geom.coordinates.shape != ref.shape:
            raise ValueError("geometry does not match the reference geometry")
        return self.predict((geom.coordinates - ref).reshape(1, -1))[0]

    __call__ = predict_D


def predict_D(models, geom: Geometry, reference: Geometry | None = None) -> np.ndarray:
    """D tensor at ``geom`` from a fitted :class:`DTensorSurrogate` or from six
    component models (xx yy zz xy xz yz) together with their ``reference``."""
    if isinstance(models, DTensorSurrogate):
        return models.predict_D(geom)
    models = list(models)
    if len(models) != 6 or reference is None:
        raise ValueError("need six component models and the reference geometry")
    if geom.coordinates.shape != reference.coordinates.shape:
        raise ValueError("geometry does not match the reference geometry")
    x = (geom.coordinates - reference.coordinates).reshape(1, -1)
    return components_to_tensor(np.array([m.predict(x)[0] for m in models]))


def _write_block(out, name, array):
    array = np.atleast_2d(array)
    out.append(f"{name} {array.shape[0]} {array.shape[1]}")
    out += [" ".join(f"{v:.17g}" for v in row) for row in array]


def save_surrogate(path, surrogate: DTensorSurrogate) -> None:
    check_is_fitted(surrogate, "models_")
    ref = surrogate.reference
    ref = np.asarray(ref.coordinates if isinstance(ref, Geometry) else ref, dtype=float)
    out = [f"{MODEL_FORMAT} {MODEL_VERSION}", "n_models 6"]
    _write_block(out, "reference", ref)
    for name, model in zip(COMPONENTS, surrogate.models_):
        out.append(f"component {name}")
        out.append("layers " + " ".join(str(n) for n in model.layer_dims_))
        out.append("activation sigmoid")
        out.append(f"l2_lambda {model.l2_lambda:.17g}")
        out.append(f"y_norm {model.y_mean_:.17g} {model.y_scale_:.17g}")
        _write_block(out, "x_mean", model.x_mean_)
        _write_block(out, "x_scale", model.x_scale_)
        for k, p in enumerate(model.params_):
            _write_block(out, f"{'W' if k % 2 == 0 else 'b'}{k // 2}", p)
    Path(path).write_text("\n".join(out) + "\n")


def load_surrogate(path) -> DTensorSurrogate:
    lines = Path(path).read_text().splitlines()
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ValueError(f"{path}: unexpected end of model file")
        pos += 1
        return lines[pos - 1].split()

    def block(name):
        head = take()
        if head[0] != name:
            raise ValueError(f"{path}:{pos}: expected block {name!r}, found {head[0]!r}")
        rows, cols = int(head[1]), int(head[2])
        return np.array([[float(v) for v in take()] for _ in range(rows)]).reshape(rows, cols)

    if take() != [MODEL_FORMAT, str(MODEL_VERSION)]:
        raise ValueError(f"{path}: not a version-{MODEL_VERSION} surrogate file")
    take()
    reference = block("reference")
    models = []
    for name in COMPONENTS:
        if take() != ["component", name]:
            raise ValueError(f"{path}:{pos}: expected component {name}")
        dims = tuple(int(v) for v in take()[1:])
        take()
        l2 = float(take()[1])
        _, y_mean, y_scale = take()
        m = MLPSurrogate(hidden_layer_sizes=dims[1:-1], l2_lambda=l2)
        m.layer_dims_ = dims
        m.n_features_in_ = dims[0]
        m.y_mean_, m.y_scale_ = float(y_mean), float(y_scale)
        m.x_mean_ = block("x_mean")[0]
        m.x_scale_ = block("x_scale")[0]
        params = []
        for k in range(len(dims) - 1):
            params.append(block(f"W{k}"))
            params.append(block(f"b{k}")[0])
        m.params_ = params
        models.append(m)
    sur = DTensorSurrogate(reference=Geometry(reference), hidden_layer_sizes=models[0].hidden_layer_sizes)
    sur.models_ = models
    sur.n_features_in_ = models[0].n_features_in_
    return sur


def load_training_csv(path):
    """Rows of displacement components followed by Dxx Dyy Dzz Dxy Dxz Dyz."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-6], data[:, -6:]


def write_training_csv(path, X, Y) -> None:
    X = np.asarray(X, dtype=float)
    header = ",".join([f"d{k}" for k in range(X.shape[1])] + [f"D{c}" for c in COMPONENTS])
    np.savetxt(path, np.column_stack([X, Y]), delimiter=",", header=header, comments="", fmt="%.17g")
