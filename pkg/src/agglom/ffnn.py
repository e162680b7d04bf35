"""Feed-forward networks trained with scaled conjugate gradient.

A neuron computes I = sum(W * O_prev) (weighted-sum propagation), then
A = f_act(I + B), and the output function is the identity throughout, so a
layer is O = f_act(W @ O_prev + B). Supported activations are identity, tanh
and softmax. Costs are the mean squared error

    C_mse = (1/N) * sum_i (T_i - O_i)^2

for regression and the cross-entropy

    C_ce = -(1/N) * sum_i T_i * ln(O_i)

for classification, both averaged over a batch during training. Training is
full-batch scaled conjugate gradient (Moller's algorithm) with early stopping
on the validation cost and best-validation weight snapshotting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, TrainingDivergedError

ACTIVATIONS = ("identity", "tanh", "softmax")
_CE_EPS = 1e-12


@dataclass
class Topology:
    n_input: int
    hidden: tuple[int, ...]
    n_output: int
    hidden_activation: str = "tanh"
    output_activation: str = "softmax"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_input < 1 or self.n_output < 1:
            raise ValueError("n_input and n_output must be >= 1")
        if len(self.hidden) > 2:
            raise ValueError("at most two hidden layers are supported")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be >= 1")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    def layer_sizes(self) -> list[tuple[int, int, str]]:
        """(n_in, n_out, activation) triples for the weight layers."""
        sizes = (self.n_input,) + self.hidden + (self.n_output,)
        acts = [self.hidden_activation] * len(self.hidden) + [self.output_activation]
        return [(sizes[i], sizes[i + 1], acts[i]) for i in range(len(acts))]


@dataclass
class Layer:
    weights: np.ndarray  # (n_out, n_in)
    biases: np.ndarray  # (n_out,)
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ValueError("weights must be 2-d and biases 1-d")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ValueError("bias length must match the weight row count")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    # softmax, numerically stabilized row-wise
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Network:
    layers: list[Layer]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weights.shape[1] != prev.weights.shape[0]:
                raise ValueError("layer input/output sizes do not chain")

    @property
    def n_input(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def n_output(self) -> int:
        return self.layers[-1].weights.shape[0]

    def n_params(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def topology(self) -> Topology:
        hidden = tuple(l.weights.shape[0] for l in self.layers[:-1])
        hidden_act = self.layers[0].activation if len(self.layers) > 1 else "tanh"
        return Topology(self.n_input, hidden, self.n_output,
                        hidden_act, self.layers[-1].activation)

    def forward(self, x) -> np.ndarray:
        """Forward pass; accepts a single vector or a (batch, n_input) array."""
        a = np.asarray(x, dtype=np.float64)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.shape[1] != self.n_input:
            raise ValueError(
                f"input length {a.shape[1]} does not match n_input {self.n_input}"
            )
        for layer in self.layers:
            a = _apply_activation(a @ layer.weights.T + layer.biases, layer.activation)
        return a[0] if single else a

    def copy(self) -> "Network":
        return Network(
            [Layer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers],
            dict(self.meta),
        )


def init_weights(topology: Topology, rng: np.random.Generator) -> Network:
    """Uniform fan-balanced initialization in +-sqrt(6/(fan_in+fan_out)); zero biases."""
    layers = []
    for n_in, n_out, act in topology.layer_sizes():
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        layers.append(Layer(w, np.zeros(n_out), act))
    return Network(layers)


def cost_mse(output, target) -> float:
    o = np.asarray(output, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if o.shape != t.shape or o.ndim != 1 or o.size < 1:
        raise ValueError("output and target must be equal-length vectors")
    return float(np.mean((t - o) ** 2))


def cost_cross_entropy(output, target) -> float:
    o = np.asarray(output, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if o.shape != t.shape or o.ndim != 1 or o.size < 1:
        raise ValueError("output and target must be equal-length vectors")
    if not (np.all((t == 0.0) | (t == 1.0)) and t.sum() == 1.0):
        raise ValueError("target must be a one-hot vector")
    return float(-np.mean(t * np.log(np.maximum(o, _CE_EPS))))


def _batch_cost(outputs: np.ndarray, targets: np.ndarray, kind: str) -> float:
    if kind == "mse":
        per_sample = np.mean((targets - outputs) ** 2, axis=1)
    elif kind == "ce":
        per_sample = -np.mean(targets * np.log(np.maximum(outputs, _CE_EPS)), axis=1)
    else:
        raise ValueError(f"unknown cost kind {kind!r}")
    return float(per_sample.mean())


def get_params(net: Network) -> np.ndarray:
    """Flatten all weights and biases, layer by layer (weights then biases)."""
    parts = []
    for layer in net.layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.biases)
    return np.concatenate(parts)


def set_params(net: Network, vec: np.ndarray) -> None:
    pos = 0
    for layer in net.layers:
        n = layer.weights.size
        layer.weights[...] = vec[pos : pos + n].reshape(layer.weights.shape)
        pos += n
        n = layer.biases.size
        layer.biases[...] = vec[pos : pos + n]
        pos += n
    if pos != vec.size:
        raise ValueError("parameter vector length does not match the network")


def _forward_trace(net: Network, inputs: np.ndarray) -> list[np.ndarray]:
    activations = [inputs]
    a = inputs
    for layer in net.layers:
        a = _apply_activation(a @ layer.weights.T + layer.biases, layer.activation)
        activations.append(a)
    return activations


def gradient(net: Network, inputs, targets, cost: str) -> np.ndarray:
    """Analytic gradient of the batch-mean cost over all weights and biases.

    Softmax output with cross-entropy uses the standard simplification
    (output delta proportional to O - T). Cross-entropy requires a softmax
    output layer; mean squared error works with any output activation.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("batch must not be empty")
    if x.shape[1] != net.n_input or t.shape[1] != net.n_output or x.shape[0] != t.shape[0]:
        raise ValueError("batch dimensions do not match the network")
    out_act = net.layers[-1].activation
    if cost == "ce" and out_act != "softmax":
        raise ValueError("cross-entropy requires a softmax output layer")
    batch = x.shape[0]
    n_out = net.n_output
    activations = _forward_trace(net, x)
    o = activations[-1]
    if cost == "ce":
        delta = (o - t) / (n_out * batch)
    elif cost == "mse":
        g = 2.0 * (o - t) / (n_out * batch)
        if out_act == "identity":
            delta = g
        elif out_act == "tanh":
            delta = g * (1.0 - o * o)
        else:  # softmax
            delta = o * (g - np.sum(g * o, axis=1, keepdims=True))
    else:
        raise ValueError(f"unknown cost kind {cost!r}")
    grads = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        a_prev = activations[idx]
        gw = delta.T @ a_prev
        gb = delta.sum(axis=0)
        grads[idx] = (gw, gb)
        if idx > 0:
            upstream = delta @ layer.weights
            prev_act = net.layers[idx - 1].activation
            if prev_act == "tanh":
                delta = upstream * (1.0 - a_prev * a_prev)
            elif prev_act == "identity":
                delta = upstream
            else:  # softmax hidden layer
                delta = a_prev * (upstream - np.sum(upstream * a_prev, axis=1, keepdims=True))
    parts = []
    for gw, gb in grads:
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


@dataclass
class DataSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.validation = np.asarray(self.validation, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        combined = np.concatenate((self.train, self.validation, self.test))
        if combined.size == 0:
            raise ValueError("split must cover at least one sample")
        if np.unique(combined).size != combined.size:
            raise ValueError("split index sets must be disjoint")

    @property
    def n_samples(self) -> int:
        return self.train.size + self.validation.size + self.test.size


def split_data(n_samples: int, rng: np.random.Generator,
               fractions=(0.70, 0.15, 0.15)) -> DataSplit:
    """Shuffle and partition indices by the largest-remainder rounding rule."""
    if n_samples < 3:
        raise ValueError("need at least 3 samples to split")
    frac = np.asarray(fractions, dtype=np.float64)
    if frac.size != 3 or abs(frac.sum() - 1.0) > 1e-9 or np.any(frac < 0):
        raise ValueError("fractions must be three non-negative values summing to 1")
    exact = frac * n_samples
    base = np.floor(exact).astype(np.int64)
    remainder = exact - base
    leftover = n_samples - int(base.sum())
    # ties broken toward the earlier set (train, validation, test)
    order = np.argsort(-remainder, kind="stable")
    for i in range(leftover):
        base[order[i]] += 1
    perm = rng.permutation(n_samples)
    a, b = base[0], base[0] + base[1]
    return DataSplit(perm[:a], perm[a:b], perm[b:])


def scg_train(
    net: Network,
    inputs,
    targets,
    split: DataSplit,
    cost: str,
    max_epochs: int,
    patience: int | None = 6,
    sigma0: float = 1e-4,
    lambda0: float = 1e-6,
) -> tuple[Network, dict]:
    """Full-batch scaled conjugate gradient training with early stopping.

    One epoch is one SCG iteration. After every epoch the validation and test
    costs are recorded; training stops at ``max_epochs`` or once the
    validation cost has not improved for ``patience`` consecutive epochs
    (``patience=None`` disables early stopping). The returned network carries
    the weights of the best-validation epoch.
    """
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if split.n_samples != x.shape[0]:
        raise ValueError("split does not cover the data")
    if split.train.size == 0:
        raise ValueError("training set must not be empty")
    xtr, ttr = x[split.train], t[split.train]
    xval, tval = x[split.validation], t[split.validation]
    xte, tte = x[split.test], t[split.test]

    work = net.copy()

    def train_cost(vec: np.ndarray) -> float:
        set_params(work, vec)
        return _batch_cost(work.forward(xtr), ttr, cost)

    def train_grad(vec: np.ndarray) -> np.ndarray:
        set_params(work, vec)
        return gradient(work, xtr, ttr, cost)

    def subset_cost(vec: np.ndarray, xs: np.ndarray, ts: np.ndarray) -> float:
        if xs.shape[0] == 0:
            return float("nan")
        set_params(work, vec)
        return _batch_cost(work.forward(xs), ts, cost)

    history: dict = {"train": [], "val": [], "test": []}

    w = get_params(net)
    n_params = w.size
    r = -train_grad(w)
    p = r.copy()
    success = True
    lam = float(lambda0)
    lam_bar = 0.0
    delta = 0.0
    e_now = train_cost(w)
    if not np.isfinite(e_now):
        raise TrainingDivergedError("initial training cost is not finite", history)

    best_w = w.copy()
    best_val = np.inf
    best_epoch = 0
    stall = 0
    for epoch in range(1, max_epochs + 1):
        p2 = float(p @ p)
        pnorm = np.sqrt(p2)
        if pnorm < 1e-300:
            break
        if success:
            sig = sigma0 / pnorm
            s = (train_grad(w + sig * p) - (-r)) / sig
            delta = float(p @ s)
        # scale and, if needed, make the Hessian estimate positive definite
        delta = delta + (lam - lam_bar) * p2
        if delta <= 0:
            lam_bar = 2.0 * (lam - delta / p2)
            delta = -delta + lam * p2
            lam = lam_bar
        mu = float(p @ r)
        if mu == 0.0:
            break  # search direction orthogonal to the gradient: stalled
        alpha = mu / delta
        e_new = train_cost(w + alpha * p)
        if not np.isfinite(e_new):
            # overshoot probe: treat as a failed step and raise the damping
            comparison = -np.inf
        else:
            comparison = 2.0 * delta * (e_now - e_new) / (mu * mu)
        if comparison >= 0:
            w = w + alpha * p
            e_now = e_new
            r_new = -train_grad(w)
            lam_bar = 0.0
            success = True
            if epoch % n_params == 0:
                p = r_new
            else:
                beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
                p = r_new + beta * p
            r = r_new
            if comparison >= 0.75:
                lam = 0.25 * lam
        else:
            lam_bar = lam
            success = False
        if comparison < 0.25:
            if np.isfinite(comparison):
                lam = lam + delta * (1.0 - comparison) / p2
            else:
                lam = max(4.0 * lam, lambda0)

        val_cost = subset_cost(w, xval, tval)
        test_cost = subset_cost(w, xte, tte)
        history["train"].append(e_now)
        history["val"].append(val_cost)
        history["test"].append(test_cost)

        if split.validation.size > 0:
            if val_cost < best_val:
                best_val = val_cost
                best_w = w.copy()
                best_epoch = epoch
                stall = 0
            else:
                stall += 1
                if patience is not None and stall >= patience:
                    break
        else:
            best_w = w.copy()
            best_epoch = epoch
        if not success and lam > 1e200:
            break  # step size underflow; no further progress possible
        if float(r @ r) < 1e-300:
            break

    trained = net.copy()
    set_params(trained, best_w)
    history["best_epoch"] = best_epoch
    history["stopped_epoch"] = len(history["train"])
    trained.meta = dict(net.meta)
    trained.meta["history_summary"] = {
        "best_epoch": best_epoch,
        "epochs": len(history["train"]),
        "best_val": None if not np.isfinite(best_val) else float(best_val),
        "final_train": float(history["train"][-1]) if history["train"] else None,
    }
    return trained, history


def save_model(net: Network, path) -> None:
    top = net.topology()
    doc = {
        "topology": {
            "n_input": top.n_input,
            "hidden": list(top.hidden),
            "n_output": top.n_output,
            "hidden_activation": top.hidden_activation,
            "output_activation": top.output_activation,
        },
        "layers": [
            {
                "activation": l.activation,
                "weights": l.weights.tolist(),
                "biases": l.biases.tolist(),
            }
            for l in net.layers
        ],
        "meta": net.meta,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ModelFormatError("model file is missing the 'layers' field")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        try:
            layer = Layer(
                np.asarray(entry["weights"], dtype=np.float64),
                np.asarray(entry["biases"], dtype=np.float64),
                entry["activation"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"layers[{i}] is malformed: {exc}") from exc
        layers.append(layer)
    try:
        net = Network(layers, doc.get("meta", {}))
    except ValueError as exc:
        raise ModelFormatError(f"layer dimensions are inconsistent: {exc}") from exc
    top = doc.get("topology")
    if top is not None:
        declared = (top.get("n_input"), tuple(top.get("hidden", ())), top.get("n_output"))
        actual = (net.n_input, tuple(l.weights.shape[0] for l in net.layers[:-1]), net.n_output)
        if declared != actual:
            raise ModelFormatError(
                f"topology field {declared} does not match layers {actual}"
            )
    return net
