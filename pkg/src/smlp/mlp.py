"""Multi-layer perceptrons: forward evaluation, backprop, SGD training.

Networks are plain feed-forward stacks: each output scalar is a linear
combination of activation outputs, phi_k = sum_i a_ik g(sum_j b_ij x_j
+ bias_i) + c_k, generalized to several hidden layers.  Training is
mini-batch stochastic gradient descent on mean-squared error, with the
per-point pass criterion |prediction - reference| <= tau_a + tau_r *
|reference| deciding convergence on held-out data.

Networks built by this package expect inputs centered to [-1, 1] (see
``center_unit_inputs``); all-positive unit-cube inputs make first-layer
SGD steps zig-zag badly and stall well short of tight tolerances.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TrainingDivergedError

ACTIVATIONS = ("tanh", "logistic", "linear")


def center_unit_inputs(u: np.ndarray) -> np.ndarray:
    """Map unit-cube coordinates to the symmetric cube [-1, 1]."""
    return 2.0 * np.asarray(u, dtype=np.float64) - 1.0


@dataclass
class MlpNetwork:
    """Feed-forward network with linear output layer.

    ``activations`` has one tag per hidden layer.  Weight matrix l maps
    layer l activations (rows) to layer l+1 pre-activations (columns).
    A trained network is immutable by convention; the activation-call
    counter is the only mutable state and is lock-protected.
    """

    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    _act_calls: int = field(default=0, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        if len(self.activations) != len(self.layer_sizes) - 2:
            raise ValueError("one activation tag per hidden layer required")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        for l, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            if self.weights[l].shape != (a, b) or self.biases[l].shape != (b,):
                raise ValueError(f"layer {l} weight/bias shapes inconsistent")
            if not (np.all(np.isfinite(self.weights[l])) and np.all(np.isfinite(self.biases[l]))):
                raise ValueError(f"layer {l} has non-finite parameters")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def activation_calls(self) -> int:
        with self._lock:
            return self._act_calls

    def reset_activation_calls(self) -> None:
        with self._lock:
            self._act_calls = 0

    def _count(self, evaluations: int) -> None:
        with self._lock:
            self._act_calls += evaluations * sum(self.hidden_widths)

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            layer_sizes=self.layer_sizes,
            activations=self.activations,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


def init_network(
    layer_sizes, activations=None, seed: int = 0
) -> MlpNetwork:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    sizes = tuple(int(n) for n in layer_sizes)
    if activations is None:
        activations = ("tanh",) * (len(sizes) - 2)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-lim, lim, size=(a, b)))
        biases.append(np.zeros(b))
    return MlpNetwork(
        layer_sizes=sizes, activations=tuple(activations), weights=weights, biases=biases
    )


def _apply(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(z)
    if tag == "logistic":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _apply_deriv(tag: str, a: np.ndarray) -> np.ndarray:
    """Activation derivative expressed through the activation value."""
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "logistic":
        return a * (1.0 - a)
    return np.ones_like(a)


def _forward_raw(net: MlpNetwork, x2d: np.ndarray) -> np.ndarray:
    """Batch forward pass with no validation and no counting.

    Single rows are padded to two so every call takes the same BLAS
    (GEMM) code path; results are then bitwise independent of how a
    query set is batched.
    """
    padded = x2d.shape[0] == 1
    h = np.vstack([x2d, x2d]) if padded else x2d
    for l, tag in enumerate(net.activations):
        h = _apply(tag, h @ net.weights[l] + net.biases[l])
    out = h @ net.weights[-1] + net.biases[-1]
    return out[:1] if padded else out


def mlp_forward_batch(net: MlpNetwork, x: np.ndarray) -> np.ndarray:
    """Evaluate a batch of input rows; counts activation calls."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.n_inputs:
        raise ValueError(f"inputs must have shape (n, {net.n_inputs})")
    out = _forward_raw(net, x)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network output (overflow)")
    net._count(x.shape[0])
    return out


def mlp_forward(net: MlpNetwork, x: np.ndarray) -> np.ndarray:
    """Evaluate a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.n_inputs:
        raise ValueError(f"input must be a vector of length {net.n_inputs}")
    return mlp_forward_batch(net, x[None, :])[0]


def mlp_backprop_grad(
    net: MlpNetwork, x: np.ndarray, y: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact gradients of batch-mean squared error.

    The loss is mean((prediction - target)^2) over every batch element
    and output component, so duplicating samples leaves the gradient
    unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x and y must be 2-D with matching batch size")
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if x.shape[1] != net.n_inputs or y.shape[1] != net.n_outputs:
        raise ValueError("batch width does not match network layer sizes")

    acts = [x]
    h = x
    for l, tag in enumerate(net.activations):
        h = _apply(tag, h @ net.weights[l] + net.biases[l])
        acts.append(h)
    out = h @ net.weights[-1] + net.biases[-1]

    delta = 2.0 * (out - y) / out.size
    grad_w = [np.empty(0)] * len(net.weights)
    grad_b = [np.empty(0)] * len(net.biases)
    for l in range(len(net.weights) - 1, -1, -1):
        grad_w[l] = acts[l].T @ delta
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l].T) * _apply_deriv(net.activations[l - 1], acts[l])
    return grad_w, grad_b


@dataclass(frozen=True)
class ToleranceSpec:
    """Combined absolute/relative pass tolerance.

    The per-point threshold for scalar k is tau_a[k] + tau_r *
    |reference_k|; the reference enters by absolute value so negative
    scalars keep a positive threshold.
    """

    tau_a: np.ndarray
    tau_r: float

    def __post_init__(self):
        tau_a = np.atleast_1d(np.asarray(self.tau_a, dtype=np.float64))
        if np.any(tau_a < 0) or self.tau_r < 0:
            raise ValueError("tolerances must be non-negative")
        if self.tau_r == 0 and np.all(tau_a == 0):
            raise ValueError("tau_a and tau_r cannot both be zero")
        object.__setattr__(self, "tau_a", tau_a)

    @classmethod
    def from_table_values(cls, values: np.ndarray, tau_a_mult: float, tau_r: float):
        """Absolute part scaled off each scalar's largest magnitude."""
        return cls(tau_a=tau_a_mult * np.abs(values).max(axis=0), tau_r=tau_r)

    def threshold(self, reference: np.ndarray) -> np.ndarray:
        return self.tau_a + self.tau_r * np.abs(np.asarray(reference, dtype=np.float64))

    def subset(self, indices) -> "ToleranceSpec":
        tau_a = self.tau_a if self.tau_a.size == 1 else self.tau_a[list(indices)]
        return ToleranceSpec(tau_a=tau_a, tau_r=self.tau_r)


def tolerance_pass(prediction, reference, tol: ToleranceSpec) -> bool:
    """True when every component is within its combined tolerance."""
    p = np.atleast_1d(np.asarray(prediction, dtype=np.float64))
    r = np.atleast_1d(np.asarray(reference, dtype=np.float64))
    if p.shape != r.shape:
        raise ValueError("prediction/reference shape mismatch")
    return bool(np.all(np.abs(p - r) <= tol.threshold(r)))


def pass_rate(predictions, references, tol: ToleranceSpec) -> float:
    """Fraction of points whose every scalar passes the tolerance."""
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError("prediction/reference shape mismatch")
    if p.ndim == 1:
        p = p[:, None]
        r = r[:, None]
    ok = np.abs(p - r) <= tol.threshold(r)
    return float(np.all(ok, axis=1).mean())


@dataclass(frozen=True)
class OutputScaler:
    """Affine map between raw scalar values and centered [-1, 1] targets."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        span = hi - lo
        span[span == 0.0] = 1.0  # constant scalar: map to its own value
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", lo + span)

    @classmethod
    def identity(cls, n: int) -> "OutputScaler":
        return cls(lo=-np.ones(n), hi=np.ones(n))

    def to_normalized(self, raw: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(raw, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def to_raw(self, normalized: np.ndarray) -> np.ndarray:
        return (np.asarray(normalized, dtype=np.float64) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


@dataclass(frozen=True)
class SgdParams:
    learning_rate: float = 0.25
    batch_size: int = 16
    max_iterations: int = 2500  # one iteration = one pass over the training set
    seed: int = 0
    shuffle: bool = True
    plateau_patience: int = 50  # halve lr after this many epochs without a new best
    min_lr_factor: float = 1e-3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.max_iterations < 1:
            raise ValueError("batch size and max iterations must be >= 1")


@dataclass(frozen=True)
class EarlyStopPolicy:
    """Abandon rules evaluated on the held-out pass rate.

    ``checkpoint_epoch``: if set, training is abandoned at that epoch
    unless the pass rate has reached ``min_pass_rate``.
    ``stagnation_epochs``: if set, training is abandoned once this many
    consecutive epochs bring neither a new best pass rate nor a
    meaningful (2%) drop in training loss -- further iterations are no
    longer contributing.
    """

    checkpoint_epoch: int | None = None
    min_pass_rate: float = 0.5
    stagnation_epochs: int | None = 300


@dataclass
class TrainOutcome:
    status: str  # converged | early_terminated | max_iters
    epochs: int
    test_pass_rate: float
    train_mse: float


def sgd_train(
    net: MlpNetwork,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test_raw: np.ndarray,
    tol: ToleranceSpec,
    params: SgdParams,
    stop: EarlyStopPolicy | None = None,
    scaler: OutputScaler | None = None,
) -> TrainOutcome:
    """Mini-batch SGD until every test point passes the tolerance.

    ``y_train`` holds normalized targets; ``y_test_raw`` holds raw-unit
    references, against which predictions are compared after mapping
    through ``scaler``.  After every epoch the test pass rate is
    measured; the learning rate halves when it plateaus, and the best
    weights seen are restored on any non-converged exit.  Deterministic
    for fixed seed.

    Raises TrainingDivergedError when the loss turns non-finite.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    x_test = np.asarray(x_test, dtype=np.float64)
    y_test_raw = np.asarray(y_test_raw, dtype=np.float64)
    if len(x_train) == 0 or len(x_test) == 0:
        raise ValueError("empty training or test set")
    if y_test_raw.ndim == 1:
        y_test_raw = y_test_raw[:, None]
    scaler = scaler or OutputScaler.identity(net.n_outputs)
    stop = stop or EarlyStopPolicy(checkpoint_epoch=None, stagnation_epochs=None)

    rng = np.random.default_rng(params.seed)
    lr = params.learning_rate
    lr_floor = params.learning_rate * params.min_lr_factor
    best_rate = -1.0
    best_mse = np.inf
    best_snapshot = None
    stall = 0
    stagnant = 0
    mse_anchor = np.inf
    n = len(x_train)

    def evaluate() -> tuple[float, float]:
        pred_raw = scaler.to_raw(_forward_raw(net, x_test))
        if not np.all(np.isfinite(pred_raw)):
            raise TrainingDivergedError("non-finite predictions during training")
        rate = pass_rate(pred_raw, y_test_raw, tol)
        out = _forward_raw(net, x_train)
        mse = float(np.mean((out - y_train) ** 2))
        return rate, mse

    epochs_run = 0
    for epoch in range(params.max_iterations):
        epochs_run = epoch + 1
        order = rng.permutation(n) if params.shuffle else np.arange(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, params.batch_size):
                idx = order[start : start + params.batch_size]
                gw, gb = mlp_backprop_grad(net, x_train[idx], y_train[idx])
                for l in range(len(net.weights)):
                    net.weights[l] -= lr * gw[l]
                    net.biases[l] -= lr * gb[l]
        if any(not np.all(np.isfinite(w)) for w in net.weights):
            raise TrainingDivergedError(
                f"weights diverged at epoch {epochs_run} (learning rate too high?)"
            )
        rate, mse = evaluate()
        if not np.isfinite(mse):
            raise TrainingDivergedError(f"loss diverged at epoch {epochs_run}")

        if rate > best_rate or (rate == best_rate and mse < best_mse):
            if rate > best_rate:
                stall = 0
                stagnant = 0
            best_rate = rate
            best_mse = mse
            best_snapshot = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])
        if rate >= 1.0:
            return TrainOutcome("converged", epochs_run, 1.0, mse)
        if mse < 0.98 * mse_anchor:
            # Loss still falling: these iterations are contributing even
            # while the coarse pass rate holds flat.
            mse_anchor = mse
            stagnant = 0

        stall += 1
        stagnant += 1
        if stall >= params.plateau_patience:
            lr = max(lr * 0.5, lr_floor)
            stall = 0
        if stop.checkpoint_epoch is not None and epochs_run == stop.checkpoint_epoch:
            if best_rate < stop.min_pass_rate:
                break
        if stop.stagnation_epochs is not None and stagnant >= stop.stagnation_epochs:
            break
    else:
        if best_snapshot is not None:
            net.weights, net.biases = best_snapshot
        return TrainOutcome("max_iters", epochs_run, best_rate, best_mse)

    if best_snapshot is not None:
        net.weights, net.biases = best_snapshot
    return TrainOutcome("early_terminated", epochs_run, best_rate, best_mse)


def activation_cost(arch, num_vars: int, mode: str = "paper_estimate"):
    """Activation-function evaluations implied by an architecture.

    ``paper_estimate`` multiplies layer count x mean hidden width x
    number of variables.  ``exact`` sums the hidden widths and scales by
    ``num_vars`` forward passes, matching the runtime activation
    counter; a multi-output network computes all its outputs in one
    pass, so its exact per-evaluation cost is just the width sum.
    """
    if isinstance(arch, MlpNetwork):
        hidden = arch.hidden_widths
    else:
        hidden = tuple(int(w) for w in arch)
    if num_vars < 0:
        raise ValueError("num_vars must be non-negative")
    if mode == "paper_estimate":
        return len(hidden) * float(np.mean(hidden)) * num_vars
    if mode == "exact":
        return int(sum(hidden)) * num_vars
    raise ValueError(f"unknown mode {mode!r}")
