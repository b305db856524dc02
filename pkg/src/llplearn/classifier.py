"""Small differentiable softmax classifiers with hand-written gradients.

Two architectures: a linear softmax model and a one-hidden-layer MLP (relu
or tanh).  Both expose logits plus an explicit backward pass, so training
needs no autodiff framework and gradient correctness can be verified against
finite differences.  Everything runs in float64; with fixed seeds and inputs
a single-threaded run is bitwise reproducible.

Losses:

* instance-level cross-entropy against one-hot pseudo labels, and
* the bag-level proportion loss: cross-entropy between a bag's given label
  proportion and the bag's mean predicted class probabilities.

Checkpoints are single JSON files holding an architecture descriptor plus
base64-encoded little-endian float64 parameter arrays (layout documented in
the README).
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .domain import Bag, ScoreMatrix

_LOG_CLAMP = 1e-12
_CHECKPOINT_FORMAT = "llplearn-model-v1"


class TrainingDiverged(RuntimeError):
    """A training step produced a non-finite loss."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                  fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SoftmaxLinear:
    """Linear logits followed by a softmax."""

    kind = "softmax_linear"

    def __init__(self, feature_dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.params = {
            "W": _uniform_init(rng, (num_classes, feature_dim), feature_dim),
            "b": np.zeros(num_classes),
        }

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.params["W"].T + self.params["b"]

    def backward(self, X: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        return {"W": dlogits.T @ X, "b": dlogits.sum(axis=0)}

    def architecture(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "num_classes": self.num_classes}

    def copy(self) -> "SoftmaxLinear":
        out = SoftmaxLinear.__new__(SoftmaxLinear)
        out.feature_dim = self.feature_dim
        out.num_classes = self.num_classes
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out


class MLP:
    """One hidden layer (relu or tanh), then linear logits."""

    kind = "mlp"

    def __init__(self, feature_dim: int, num_classes: int, hidden_width: int = 64,
                 activation: str = "relu", seed: int = 0):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden_width = hidden_width
        self.activation = activation
        self.params = {
            "W1": _uniform_init(rng, (hidden_width, feature_dim), feature_dim),
            "b1": np.zeros(hidden_width),
            "W2": _uniform_init(rng, (num_classes, hidden_width), hidden_width),
            "b2": np.zeros(num_classes),
        }

    def _hidden(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pre = X @ self.params["W1"].T + self.params["b1"]
        act = np.maximum(pre, 0.0) if self.activation == "relu" else np.tanh(pre)
        return pre, act

    def logits(self, X: np.ndarray) -> np.ndarray:
        _, act = self._hidden(X)
        return act @ self.params["W2"].T + self.params["b2"]

    def backward(self, X: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        pre, act = self._hidden(X)
        dact = dlogits @ self.params["W2"]
        if self.activation == "relu":
            dpre = dact * (pre > 0.0)
        else:
            dpre = dact * (1.0 - np.tanh(pre) ** 2)
        return {
            "W1": dpre.T @ X,
            "b1": dpre.sum(axis=0),
            "W2": dlogits.T @ act,
            "b2": dlogits.sum(axis=0),
        }

    def architecture(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "num_classes": self.num_classes, "hidden_width": self.hidden_width,
                "activation": self.activation}

    def copy(self) -> "MLP":
        out = MLP.__new__(MLP)
        out.feature_dim = self.feature_dim
        out.num_classes = self.num_classes
        out.hidden_width = self.hidden_width
        out.activation = self.activation
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out


ClassifierModel = SoftmaxLinear | MLP


def init_model(kind: str, feature_dim: int, num_classes: int,
               hidden_width: int = 64, activation: str = "relu",
               seed: int = 0) -> ClassifierModel:
    if kind == SoftmaxLinear.kind or kind == "linear":
        return SoftmaxLinear(feature_dim, num_classes, seed=seed)
    if kind == MLP.kind:
        return MLP(feature_dim, num_classes, hidden_width=hidden_width,
                   activation=activation, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def num_parameters(model: ClassifierModel) -> int:
    return sum(v.size for v in model.params.values())


def predict_proba(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    """(n, C) softmax posteriors; every row sums to 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.feature_dim:
        raise ValueError(
            f"expected features of dim {model.feature_dim}, got shape {X.shape}")
    return softmax(model.logits(X))


def predict_confidences(model: ClassifierModel, bag: Bag) -> ScoreMatrix:
    """Confidence matrix for a bag: classes on rows, instances on columns."""
    if bag.num_classes != model.num_classes:
        raise ValueError("bag and model disagree on the number of classes")
    return predict_proba(model, bag.features).T


class Adam:
    """Standard Adam with bias correction; moments live per parameter name."""

    def __init__(self, learning_rate: float = 0.0003, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            if name not in self.first_moment:
                self.first_moment[name] = np.zeros_like(params[name])
                self.second_moment[name] = np.zeros_like(params[name])
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[name] = params[name] - self.learning_rate * m_hat / (
                np.sqrt(v_hat) + self.epsilon)


def cross_entropy_loss_and_grad(logits: np.ndarray,
                                labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch plus its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def proportion_loss(conf: ScoreMatrix, proportions: np.ndarray) -> float:
    """Cross-entropy between a bag's proportion and its mean predicted probs.

    ``conf`` is a (classes x instances) probability matrix.  Log arguments
    are clamped below at 1e-12 so empty predicted mass stays finite.
    """
    conf = np.asarray(conf, dtype=np.float64)
    p = np.asarray(proportions, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] != p.size:
        raise ValueError("confidence matrix rows must match the proportion length")
    if not np.isfinite(conf).all() or conf.min() < -1e-9:
        raise ValueError("confidences must be finite and nonnegative")
    if np.abs(conf.sum(axis=0) - 1.0).max() > 1e-6:
        raise ValueError("each confidence column must sum to 1")
    predicted = conf.mean(axis=1)
    return float(-(p * np.log(np.maximum(predicted, _LOG_CLAMP))).sum())


def _proportion_grad_logits(probs: np.ndarray, proportions: np.ndarray) -> np.ndarray:
    """Gradient of one bag's proportion loss w.r.t. that bag's logits."""
    m = probs.shape[0]
    predicted = probs.mean(axis=0)
    dpredicted = np.where(predicted > _LOG_CLAMP, -proportions / np.maximum(predicted, _LOG_CLAMP), 0.0)
    inner = probs @ dpredicted
    return (probs * (dpredicted[np.newaxis, :] - inner[:, np.newaxis])) / m


def _batched(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def train_epoch_cross_entropy(model: ClassifierModel, bags: list[Bag],
                              pseudo_labels: list, opt: Adam,
                              batch_bags: int = 4):
    """One pass over all instances, mini-batched by groups of bags.

    Pseudo labels are given per bag (as PseudoLabelMatrix or per-instance
    label vectors) and treated as ordinary supervised targets.  Returns the
    model and the mean instance loss over the epoch.
    """
    if len(bags) != len(pseudo_labels):
        raise ValueError("need exactly one pseudo-label matrix per bag")
    total_loss = 0.0
    total_count = 0
    paired = list(zip(bags, pseudo_labels))
    for chunk in _batched(paired, batch_bags):
        X = np.concatenate([bag.features for bag, _ in chunk], axis=0)
        y = np.concatenate([
            labels.column_labels if hasattr(labels, "column_labels")
            else np.asarray(labels, dtype=np.int64)
            for _, labels in chunk
        ])
        logits = model.logits(X)
        loss, dlogits = cross_entropy_loss_and_grad(logits, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"cross-entropy loss became {loss!r}")
        opt.step(model.params, model.backward(X, dlogits))
        total_loss += loss * X.shape[0]
        total_count += X.shape[0]
    return model, total_loss / total_count


def train_epoch_proportion_loss(model: ClassifierModel, bags: list[Bag],
                                opt: Adam, batch_bags: int = 4):
    """One pass over all bags using only their proportion vectors.

    Within a mini-batch the per-bag losses are averaged, and the gradient
    flows through each bag's mean softmax output.  Returns the model and
    the mean per-bag loss over the epoch.
    """
    total_loss = 0.0
    for chunk in _batched(list(bags), batch_bags):
        X = np.concatenate([bag.features for bag in chunk], axis=0)
        logits = model.logits(X)
        probs = softmax(logits)
        dlogits = np.zeros_like(logits)
        chunk_loss = 0.0
        offset = 0
        for bag in chunk:
            sl = slice(offset, offset + bag.size)
            offset += bag.size
            bag_probs = probs[sl]
            predicted = bag_probs.mean(axis=0)
            chunk_loss += float(
                -(bag.proportions * np.log(np.maximum(predicted, _LOG_CLAMP))).sum())
            dlogits[sl] = _proportion_grad_logits(bag_probs, bag.proportions)
        dlogits /= len(chunk)
        mean_chunk_loss = chunk_loss / len(chunk)
        if not np.isfinite(mean_chunk_loss):
            raise TrainingDiverged(f"proportion loss became {mean_chunk_loss!r}")
        opt.step(model.params, model.backward(X, dlogits))
        total_loss += chunk_loss
    return model, total_loss / len(bags)


def _flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def _loss_for_check(model: ClassifierModel, loss_kind: str, X: np.ndarray,
                    target) -> tuple[float, dict[str, np.ndarray]]:
    logits = model.logits(X)
    if loss_kind == "cross_entropy":
        loss, dlogits = cross_entropy_loss_and_grad(logits, target)
    elif loss_kind == "proportion":
        probs = softmax(logits)
        loss = proportion_loss(probs.T, target)
        dlogits = _proportion_grad_logits(probs, np.asarray(target, dtype=np.float64))
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return loss, model.backward(X, dlogits)


def gradient_check(model: ClassifierModel, loss_kind: str, X: np.ndarray,
                   target, step: float = 1e-5, max_coords: int = 400,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central finite-difference grads.

    ``target`` is a label vector for ``cross_entropy`` or a proportion
    vector (treating ``X`` as one bag) for ``proportion``.  Checks every
    coordinate for small models, otherwise a seeded sample of them.
    """
    X = np.asarray(X, dtype=np.float64)
    _, grads = _loss_for_check(model, loss_kind, X, target)
    worst = 0.0
    rng = np.random.default_rng(seed)
    for name in sorted(model.params):
        flat = model.params[name].ravel()
        analytic = grads[name].ravel()
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            up, _ = _loss_for_check(model, loss_kind, X, target)
            flat[i] = original - step
            down, _ = _loss_for_check(model, loss_kind, X, target)
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def save_checkpoint(model: ClassifierModel, path) -> None:
    """Write the architecture descriptor plus little-endian float64 params."""
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "architecture": model.architecture(),
        "parameters": {
            name: {
                "shape": list(value.shape),
                "dtype": "<f8",
                "data": base64.b64encode(
                    np.ascontiguousarray(value, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, value in model.params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_checkpoint(path) -> ClassifierModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {_CHECKPOINT_FORMAT} checkpoint")
    arch = payload["architecture"]
    kind = arch["kind"]
    if kind == SoftmaxLinear.kind:
        model = SoftmaxLinear(arch["feature_dim"], arch["num_classes"])
    elif kind == MLP.kind:
        model = MLP(arch["feature_dim"], arch["num_classes"],
                    hidden_width=arch["hidden_width"], activation=arch["activation"])
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    for name, spec in payload["parameters"].items():
        if name not in model.params:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        raw = base64.b64decode(spec["data"])
        value = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).astype(np.float64)
        if value.shape != model.params[name].shape:
            raise ValueError(f"{path}: parameter {name!r} has the wrong shape")
        model.params[name] = value
    return model
