"""Dense neural network core: MLP definition, backpropagation and SGD.

Parameters are stored as 32-bit floats. Every function here is pure with
respect to its inputs, so models can be shared read-only between threads.
"""

import hashlib
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from .defaults import ExperimentDefaults
from .errors import ShapeMismatchError

if TYPE_CHECKING:
    from .mnist import LabeledDataset

PARAM_DTYPE = np.float32
MASK64 = (1 << 64) - 1


@dataclass
class Hyperparams:
    """Local training hyperparameters."""

    learning_rate: float = ExperimentDefaults.LEARNING_RATE
    batch_size: int = ExperimentDefaults.BATCH_SIZE
    epochs_per_round: int = ExperimentDefaults.EPOCHS_PER_ROUND

    def validate(self) -> List[str]:
        """Return a list of problems (empty when valid)."""
        problems = []
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            problems.append(f"learning_rate must be a finite value >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_per_round < 0:
            problems.append(f"epochs_per_round must be >= 0, got {self.epochs_per_round}")
        return problems


@dataclass(eq=False)
class MlpModel:
    """Multilayer perceptron with rectifier hidden layers and a softmax output.

    ``weights[k]`` has shape (out_dim, in_dim) and ``biases[k]`` has shape
    (out_dim,) for layer k.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def layer_dims(self) -> Tuple[int, ...]:
        dims = [self.weights[0].shape[1]]
        dims.extend(w.shape[0] for w in self.weights)
        return tuple(int(d) for d in dims)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def copy(self) -> "MlpModel":
        return MlpModel(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def astype(self, dtype) -> "MlpModel":
        """Copy of the model with every parameter cast to ``dtype``."""
        return MlpModel(
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))

    def check_congruent(self, other: "MlpModel") -> None:
        """
        Raise if ``other`` does not have exactly the same layer shapes.

        Args:
            other: Model to compare against

        Raises:
            ShapeMismatchError: If layer dimensions differ
        """
        if self.layer_dims != other.layer_dims:
            raise ShapeMismatchError(
                f"Model shapes differ: {list(self.layer_dims)} vs {list(other.layer_dims)}"
            )

    def equals(self, other: "MlpModel") -> bool:
        """Bitwise equality of every parameter."""
        if self.layer_dims != other.layer_dims:
            return False
        return all(
            w.tobytes() == ow.tobytes() and b.tobytes() == ob.tobytes()
            for w, b, ow, ob in zip(self.weights, self.biases, other.weights, other.biases)
        )

    def max_abs_diff(self, other: "MlpModel") -> float:
        """Largest absolute per-parameter difference between two congruent models."""
        self.check_congruent(other)
        diffs = [
            float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)), initial=0.0))
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        ]
        return max(diffs, default=0.0)

    def fingerprint(self) -> str:
        """MD5 hex digest of the layer dims and raw parameter bytes."""
        digest = hashlib.md5(repr(self.layer_dims).encode())
        for w, b in zip(self.weights, self.biases):
            digest.update(np.ascontiguousarray(w).tobytes())
            digest.update(np.ascontiguousarray(b).tobytes())
        return digest.hexdigest()


@dataclass(eq=False)
class GradientSet:
    """Per-layer gradients, shape-congruent with their model."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]


def _check_dims(layer_dims: Sequence[int]) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError(f"layer_dims needs at least 2 entries (input and output), got {list(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"every layer dimension must be >= 1, got {list(dims)}")
    return dims


def init_model(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """
    Create a model with uniform Glorot weights and zero biases.

    Args:
        layer_dims: Input, hidden and output widths
        seed: Seed of the initialization stream

    Returns:
        Freshly initialized model; identical (dims, seed) give identical bits

    Raises:
        ValueError: If fewer than 2 dims are given or any dim is 0
    """
    dims = _check_dims(layer_dims)
    rng = np.random.default_rng(int(seed) & MASK64)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(PARAM_DTYPE))
        biases.append(np.zeros(fan_out, dtype=PARAM_DTYPE))
    return MlpModel(weights=weights, biases=biases)


def zeros_model(layer_dims: Sequence[int], dtype=PARAM_DTYPE) -> MlpModel:
    """All-zero model; its predictions are uniform over the classes."""
    dims = _check_dims(layer_dims)
    return MlpModel(
        weights=[np.zeros((o, i), dtype=dtype) for i, o in zip(dims[:-1], dims[1:])],
        biases=[np.zeros(o, dtype=dtype) for o in dims[1:]],
    )


def _as_batch(model: MlpModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=model.dtype)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ValueError(
            f"input width {x.shape[-1] if x.ndim else 0} does not match model input dim {model.layer_dims[0]}"
        )
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_pass(model: MlpModel, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Return (layer inputs, pre-activations); the last pre-activation holds the logits."""
    activations = [x]
    pre_activations = []
    a = x
    last = model.n_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pre_activations.append(z)
        if k < last:
            a = np.maximum(z, 0)
            activations.append(a)
    return activations, pre_activations


def forward(model: MlpModel, inputs, chunk_size: Optional[int] = None) -> np.ndarray:
    """
    Class probabilities for a batch of input rows.

    Args:
        model: Model to evaluate
        inputs: Batch of input vectors (rows)
        chunk_size: Evaluate in chunks of this many rows to bound memory

    Returns:
        Array of probability rows, each summing to 1

    Raises:
        ValueError: On input width mismatch
    """
    x = _as_batch(model, inputs)
    if chunk_size is None or len(x) <= chunk_size:
        return _softmax(_forward_pass(model, x)[1][-1])
    parts = [
        _softmax(_forward_pass(model, x[start:start + chunk_size])[1][-1])
        for start in range(0, len(x), chunk_size)
    ]
    return np.concatenate(parts, axis=0)


def predict(model: MlpModel, inputs, chunk_size: Optional[int] = 4096) -> np.ndarray:
    """Predicted class index for each input row."""
    return forward(model, inputs, chunk_size=chunk_size).argmax(axis=1)


def mean_cross_entropy(model: MlpModel, inputs, labels, chunk_size: Optional[int] = 4096) -> float:
    """Mean cross-entropy of the model on a labeled batch, without gradients."""
    x = _as_batch(model, inputs)
    y = _check_labels(labels, len(x), model.layer_dims[-1])
    total = 0.0
    step = chunk_size or len(x)
    for start in range(0, len(x), step):
        log_probs = _log_softmax(_forward_pass(model, x[start:start + step])[1][-1])
        picked = log_probs[np.arange(len(log_probs)), y[start:start + step]]
        total += float(-picked.astype(np.float64).sum())
    return total / len(x)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if n_rows == 0:
        raise ValueError("batch is empty")
    if len(y) != n_rows:
        raise ValueError(f"{len(y)} labels for {n_rows} input rows")
    if y.min() < 0 or y.max() >= n_classes:
        bad = y[(y < 0) | (y >= n_classes)][0]
        raise ValueError(f"label {bad} out of range 0..{n_classes - 1}")
    return y


def loss_and_grads(model: MlpModel, batch, labels) -> Tuple[float, GradientSet]:
    """
    Mean cross-entropy loss and its gradients by backpropagation.

    Computation runs in the model's dtype, so a float64 copy of a model
    (``model.astype(np.float64)``) gives a 64-bit shadow evaluation.

    Args:
        model: Model to differentiate
        batch: Input rows
        labels: Class index per row

    Returns:
        Tuple of (mean loss, gradients)

    Raises:
        ValueError: Empty batch, label out of range or width mismatch
    """
    x = _as_batch(model, batch)
    y = _check_labels(labels, len(x), model.layer_dims[-1])
    n = len(x)

    activations, pre = _forward_pass(model, x)
    log_probs = _log_softmax(pre[-1])
    rows = np.arange(n)
    loss = float(-log_probs[rows, y].astype(np.float64).mean())

    delta = np.exp(log_probs)
    delta[rows, y] -= 1
    delta /= n

    grad_w: List[np.ndarray] = [None] * model.n_layers
    grad_b: List[np.ndarray] = [None] * model.n_layers
    for k in range(model.n_layers - 1, -1, -1):
        grad_w[k] = delta.T @ activations[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0)

    return loss, GradientSet(weights=grad_w, biases=grad_b)


def train_local(
    model: MlpModel,
    dataset_part: "LabeledDataset",
    hyper: Hyperparams,
    rng: np.random.Generator,
) -> Tuple[MlpModel, List[float]]:
    """
    Mini-batch SGD over a node's local data.

    Args:
        model: Starting model (not modified)
        dataset_part: Local data with ``images`` and ``labels``
        hyper: Learning rate, batch size and epochs
        rng: Node stream driving the per-epoch shuffle

    Returns:
        Tuple of (trained model, mean loss of each epoch)

    Raises:
        ValueError: If the local data is empty
        FloatingPointError: If training produces non-finite parameters
    """
    images = dataset_part.images
    labels = np.asarray(dataset_part.labels).astype(np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset part")

    trained = model.copy()
    trace: List[float] = []
    step = trained.dtype.type(hyper.learning_rate)

    for _ in range(hyper.epochs_per_round):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grads = loss_and_grads(trained, images[idx], labels[idx])
            epoch_loss += loss * len(idx)
            if hyper.learning_rate != 0:
                for k in range(trained.n_layers):
                    trained.weights[k] -= step * grads.weights[k]
                    trained.biases[k] -= step * grads.biases[k]
        if not trained.is_finite():
            raise FloatingPointError("local training produced non-finite parameters; lower the learning rate")
        trace.append(epoch_loss / n)

    return trained, trace


def flop_count(model: MlpModel, n_samples: int, epochs: int) -> int:
    """Training cost proxy: forward ~2 and backward ~4 operations per parameter per sample."""
    return 6 * model.param_count * int(n_samples) * int(epochs)
