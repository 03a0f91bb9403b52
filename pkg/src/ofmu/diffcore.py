"""Parameter vectors, small analytic model families and numerical derivatives.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Every model here
is a stack of affine layers ``z = W a + b`` with ``tanh`` between hidden
layers; the flat parameter layout is layer-major, weights before biases,
with each ``W`` of shape ``(fan_out, fan_in)`` stored row-major::

    [W1.ravel(), b1, W2.ravel(), b2, ...]

Logistic regression is the zero-hidden-layer case and linear regression is
a single affine output trained with mean squared error.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidArgument, NumericalFailure

LINEAR_REGRESSION = "linear-regression"
LOGISTIC_REGRESSION = "logistic-regression"
MLP = "mlp"
FAMILIES = (LINEAR_REGRESSION, LOGISTIC_REGRESSION, MLP)

MSE = "mean-squared-error"
CROSS_ENTROPY = "cross-entropy"

# cube root of machine epsilon: optimal relative step for central differences
FD_STEP = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)


def as_params(values, dim=None):
    """Return ``values`` as a finite 1-D float64 array, checking ``dim``."""
    theta = np.asarray(values, dtype=np.float64)
    if theta.ndim != 1:
        raise ContractViolation(f"parameter vector must be 1-D, got shape {theta.shape}")
    if dim is not None and theta.shape[0] != dim:
        raise ContractViolation(f"parameter dimension {theta.shape[0]} != expected {dim}")
    if not np.all(np.isfinite(theta)):
        raise NumericalFailure("parameter vector contains non-finite entries")
    return theta


@dataclass(frozen=True)
class LabeledBatch:
    """Rows of ``inputs`` paired with ``labels``.

    Labels are integer class indices for classifiers and real targets for
    linear regression. Arrays are stored read-only.
    """

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        y = np.array(self.labels)
        if y.ndim != 1:
            y = y.reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ContractViolation(
                f"inputs rows {x.shape[0]} and labels length {y.shape[0]} disagree"
            )
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self):
        return self.inputs.shape[0]

    def __len__(self):
        return self.size

    def take(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledBatch(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class Problem:
    """A model family plus its loss; stateless, parameters live outside."""

    family: str
    widths: tuple
    loss_kind: str
    class_count: int
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgument(f"unknown model family {self.family!r}")
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise InvalidArgument(f"layer widths must be >= 1, got {widths}")
        if self.family != MLP and len(widths) != 2:
            raise InvalidArgument(f"{self.family} takes exactly (in, out) widths")
        if self.loss_kind not in (MSE, CROSS_ENTROPY):
            raise InvalidArgument(f"unknown loss kind {self.loss_kind!r}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(
            self, "shapes", tuple((widths[i + 1], widths[i]) for i in range(len(widths) - 1))
        )

    @property
    def feature_dim(self):
        return self.widths[0]

    @property
    def dim(self):
        return sum(o * i + o for o, i in self.shapes)

    @property
    def is_classifier(self):
        return self.loss_kind == CROSS_ENTROPY

    def unpack(self, theta):
        """Split a flat vector into ``[(W, b), ...]`` views."""
        theta = as_params(theta, self.dim)
        layers, pos = [], 0
        for fan_out, fan_in in self.shapes:
            w = theta[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            b = theta[pos:pos + fan_out]
            pos += fan_out
            layers.append((w, b))
        return layers

    @staticmethod
    def pack(layers):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])

    def init_params(self, rng):
        """Scaled Gaussian weights, zero biases."""
        layers = []
        for fan_out, fan_in in self.shapes:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            layers.append((w, np.zeros(fan_out)))
        return self.pack(layers)

    def check_batch(self, batch):
        if batch.size == 0:
            raise InvalidArgument("batch is empty")
        if batch.inputs.shape[1] != self.feature_dim:
            raise ContractViolation(
                f"batch has {batch.inputs.shape[1]} features, model expects {self.feature_dim}"
            )
        if self.is_classifier:
            labels = batch.labels
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(np.mod(labels, 1) == 0):
                    raise ContractViolation("classification labels must be integers")
            if labels.min() < 0 or labels.max() >= self.class_count:
                raise ContractViolation(
                    f"labels must lie in [0, {self.class_count}), got "
                    f"[{labels.min()}, {labels.max()}]"
                )

    def _forward(self, layers, x):
        acts = [x]
        a = x
        for j, (w, b) in enumerate(layers):
            z = a @ w.T + b
            a = np.tanh(z) if j < len(layers) - 1 else z
            acts.append(a)
        return acts

    def outputs(self, theta, inputs):
        """Raw network outputs (logits, or predictions for regression)."""
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        return self._forward(self.unpack(theta), x)[-1]

    def predict_proba(self, theta, inputs):
        if not self.is_classifier:
            raise InvalidArgument("predict_proba needs a classifier")
        return _softmax(self.outputs(theta, inputs))

    def _loss_and_delta(self, out, labels, want_delta):
        n = out.shape[0]
        if self.loss_kind == MSE:
            r = out[:, 0] - labels.astype(np.float64)
            loss = float(np.mean(r * r))
            delta = (2.0 / n) * r[:, None] if want_delta else None
            return loss, delta
        y = labels.astype(np.int64)
        logp = _log_softmax(out)
        loss = float(-np.mean(logp[np.arange(n), y]))
        delta = None
        if want_delta:
            delta = np.exp(logp)
            delta[np.arange(n), y] -= 1.0
            delta /= n
        return loss, delta

    def loss(self, theta, batch):
        self.check_batch(batch)
        out = self._forward(self.unpack(theta), batch.inputs)[-1]
        return self._loss_and_delta(out, batch.labels, False)[0]

    def loss_and_grad(self, theta, batch):
        self.check_batch(batch)
        layers = self.unpack(theta)
        acts = self._forward(layers, batch.inputs)
        loss, delta = self._loss_and_delta(acts[-1], batch.labels, True)
        grads = [None] * len(layers)
        for j in range(len(layers) - 1, -1, -1):
            w, _ = layers[j]
            grads[j] = (delta.T @ acts[j], delta.sum(axis=0))
            if j > 0:
                delta = (delta @ w) * (1.0 - acts[j] ** 2)
        return loss, self.pack(grads)

    def grad(self, theta, batch):
        return self.loss_and_grad(theta, batch)[1]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _softmax(z):
    return np.exp(_log_softmax(z))


def linear_regression(feature_dim):
    return Problem(LINEAR_REGRESSION, (feature_dim, 1), MSE, 1)


def logistic_regression(feature_dim, class_count):
    return Problem(LOGISTIC_REGRESSION, (feature_dim, class_count), CROSS_ENTROPY, class_count)


def mlp(widths):
    widths = tuple(widths)
    return Problem(MLP, widths, CROSS_ENTROPY, widths[-1])


def make_problem(family, feature_dim, class_count, hidden=()):
    if family == LINEAR_REGRESSION:
        return linear_regression(feature_dim)
    if family == LOGISTIC_REGRESSION:
        return logistic_regression(feature_dim, class_count)
    if family == MLP:
        return mlp((feature_dim, *hidden, class_count))
    raise InvalidArgument(f"unknown model family {family!r}")


def eval_loss(problem, theta, batch):
    """Mean loss of ``problem`` at ``theta`` over ``batch``."""
    return problem.loss(theta, batch)


def grad(problem, theta, batch):
    """Analytic gradient of :func:`eval_loss` with respect to ``theta``."""
    return problem.grad(theta, batch)


def fd_grad(fn, theta, step=FD_STEP):
    """Central-difference gradient of a scalar function.

    Coordinate ``i`` is probed at ``theta +/- eps * e_i`` with
    ``eps = step * (1 + ||theta||)``.
    """
    if step <= 0:
        raise InvalidArgument("finite-difference step must be positive")
    theta = as_params(theta)
    eps = step * (1.0 + np.linalg.norm(theta))
    out = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.shape[0]):
        probe[i] = theta[i] + eps
        fp = fn(probe)
        probe[i] = theta[i] - eps
        fm = fn(probe)
        probe[i] = theta[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure(f"non-finite value probing coordinate {i}", coordinate=i)
        out[i] = (fp - fm) / (2.0 * eps)
    return out


def hvp(grad_fn, theta, v, step=FD_STEP):
    """Hessian-vector product as a central difference of ``grad_fn`` along ``v``.

    Costs two gradient evaluations; the Hessian is never formed.
    """
    if step <= 0:
        raise InvalidArgument("finite-difference step must be positive")
    theta = as_params(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ContractViolation(f"direction shape {v.shape} != parameter shape {theta.shape}")
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        raise InvalidArgument("hvp direction must be non-zero")
    eps = step * (1.0 + np.linalg.norm(theta)) / vnorm
    gp = np.asarray(grad_fn(theta + eps * v))
    gm = np.asarray(grad_fn(theta - eps * v))
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NumericalFailure("non-finite gradient while probing hvp direction")
    return (gp - gm) / (2.0 * eps)


# -- serialization ---------------------------------------------------------

def params_to_bytes(theta):
    theta = as_params(theta)
    return struct.pack("<I", theta.shape[0]) + theta.astype("<f8").tobytes()


def params_from_bytes(data):
    if len(data) < 4:
        raise ContractViolation("truncated parameter blob")
    (dim,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 8 * dim:
        raise ContractViolation(f"parameter blob length {len(data)} does not match dim {dim}")
    return as_params(np.frombuffer(data, dtype="<f8", offset=4).astype(np.float64), dim)


def save_params(path, theta):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(theta))


def load_params(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def params_to_text(theta):
    return "".join(f"{x!r}\n" for x in as_params(theta).tolist())


def params_from_text(text):
    return as_params([float(line) for line in text.split()])
