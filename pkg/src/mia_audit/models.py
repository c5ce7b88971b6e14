"""Target classifiers: logistic regression, one-hidden-layer ReLU network,
output-perturbed DP logistic regression and an equalized-odds post-processor.

All trainers are deterministic functions of (data, config). Inputs are
rescaled internally and the scaling is folded back into the returned weights,
so models always consume raw features.
"""
from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
from scipy.special import expit, log_softmax, softmax

from mia_audit.core import Population
from mia_audit.errors import AuditError, ValidationError


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``l2`` multiplies ``0.5 * ||W||^2`` added to the *mean* cross-entropy
    (biases are not penalised, except by the DP trainer). ``batch_size=None``
    means full-batch updates.
    """

    l2: float = 0.0
    epochs: int = 500
    lr: float | None = None
    seed: int = 0
    hidden: int | None = None
    dp_epsilon: float | None = None
    batch_size: int | None = None
    optimizer: str = "gd"

    def __post_init__(self):
        if self.l2 < 0:
            raise ValidationError("l2 strength must be non-negative")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.lr is not None and self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.hidden is not None and self.hidden < 1:
            raise ValidationError("hidden units must be positive")
        if self.dp_epsilon is not None and self.dp_epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclasses.dataclass(frozen=True, eq=False)
class LinearModel:
    """Logits ``X @ weights.T + bias``.

    A single weight row means a binary model with ``Pr[y=1] = sigmoid(logit)``.
    """

    weights: np.ndarray
    bias: np.ndarray
    p: int
    config: TrainConfig | None = None

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.atleast_1d(np.asarray(self.bias, dtype=float))
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("model parameters must be finite")
        if w.shape[0] != b.shape[0] or w.shape[0] not in (1, self.p):
            raise ValidationError(f"weights {w.shape} and bias {b.shape} do not fit p={self.p}")
        if w.shape[0] == 1 and self.p != 2:
            raise ValidationError("a single weight row is only allowed for binary models")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_features(self):
        return self.weights.shape[1]

    def logits(self, X):
        return X @ self.weights.T + self.bias


@dataclasses.dataclass(frozen=True, eq=False)
class MLPModel:
    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: np.ndarray
    config: TrainConfig | None = None

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name == "config":
                continue
            a = np.asarray(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{f.name} has non-finite entries")
            object.__setattr__(self, f.name, a)

    @property
    def p(self):
        return self.output_weights.shape[0]

    @property
    def hidden(self):
        return self.hidden_weights.shape[0]

    @property
    def n_features(self):
        return self.hidden_weights.shape[1]

    def logits(self, X):
        h = np.maximum(X @ self.hidden_weights.T + self.hidden_bias, 0.0)
        return h @ self.output_weights.T + self.output_bias


def _confidence_from_logits(logits):
    if logits.shape[1] == 1:
        s = expit(logits[:, 0])
        return np.column_stack([1.0 - s, s])
    return softmax(logits, axis=1)


def predict_confidence(model, X, z=None) -> np.ndarray:
    """Probability vectors over the classes, one row per input row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise ValidationError(f"expected {model.n_features} features, got {X.shape[1]}")
    if isinstance(model, EOModel):
        return model.confidence(X, z)
    return _confidence_from_logits(model.logits(X))


def predict(model, X, z=None, rng=None) -> np.ndarray:
    """Hard labels: argmax for deterministic models, a Bernoulli draw for EO."""
    conf = predict_confidence(model, X, z)
    if isinstance(model, EOModel):
        rng = np.random.default_rng(0) if rng is None else rng
        return (rng.random(len(conf)) < conf[:, 1]).astype(np.int64)
    return conf.argmax(axis=1)


# -- losses and gradients -------------------------------------------------------

def _one_hot(y, p):
    out = np.zeros((len(y), p))
    out[np.arange(len(y)), y] = 1.0
    return out


def logreg_loss_grad(W, b, X, y, l2):
    """Mean cross-entropy plus ``0.5 * l2 * ||W||^2`` and its gradient.

    ``W`` with one row is the binary sigmoid model; otherwise softmax over
    ``W.shape[0]`` classes.
    """
    n = len(y)
    logits = X @ W.T + b
    if W.shape[0] == 1:
        t = logits[:, 0]
        yy = y.astype(float)
        loss = np.mean(np.logaddexp(0.0, t) - yy * t)
        err = (expit(t) - yy)[:, None]
    else:
        logp = log_softmax(logits, axis=1)
        loss = -np.mean(logp[np.arange(n), y])
        err = np.exp(logp) - _one_hot(y, W.shape[0])
    loss += 0.5 * l2 * np.sum(W * W)
    dW = err.T @ X / n + l2 * W
    db = err.mean(axis=0)
    return loss, dW, db


def mlp_loss_grad(params, X, y, l2):
    """Mean softmax cross-entropy of a ReLU network plus ``0.5*l2*(||W1||^2+||W2||^2)``.

    ``params`` is ``(W1, b1, W2, b2)``; returns ``(loss, grads)`` in the same order.
    """
    W1, b1, W2, b2 = params
    n = len(y)
    pre = X @ W1.T + b1
    h = np.maximum(pre, 0.0)
    logits = h @ W2.T + b2
    logp = log_softmax(logits, axis=1)
    loss = -np.mean(logp[np.arange(n), y]) + 0.5 * l2 * (np.sum(W1 * W1) + np.sum(W2 * W2))
    d_logits = (np.exp(logp) - _one_hot(y, W2.shape[0])) / n
    dW2 = d_logits.T @ h + l2 * W2
    db2 = d_logits.sum(axis=0)
    d_pre = (d_logits @ W2) * (pre > 0)
    dW1 = d_pre.T @ X + l2 * W1
    db1 = d_pre.sum(axis=0)
    return loss, (dW1, db1, dW2, db2)


# -- scaling -----------------------------------------------------------------------

def _standardizer(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


def _fold_affine(W, b, shift, scale):
    """Weights for raw inputs given weights for ``(X - shift) / scale``."""
    W_raw = W / scale
    return W_raw, b - W_raw @ shift


def _check_training_data(X, y, p):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValidationError("training data must be a non-empty (n, d) matrix with n labels")
    if len(np.unique(y)) < 2:
        raise ValidationError("training data contains a single class")
    if y.min() < 0 or y.max() >= p:
        raise ValidationError(f"labels must lie in 0..{p - 1}")
    return X, y


def _lipschitz(Xs, l2, rows):
    # smoothness bound of mean cross-entropy: 0.25 (binary) / 0.5 (softmax) * ||X||_2^2 / n
    sigma = np.linalg.norm(Xs, 2) if Xs.size else 0.0
    factor = 0.25 if rows == 1 else 0.5
    return factor * (sigma ** 2 + len(Xs)) / len(Xs) + l2


def _fit_linear(Xs, y, rows, cfg: TrainConfig, penalize_bias=False):
    """Nesterov-accelerated full-batch gradient descent on the scaled problem."""
    d = Xs.shape[1]
    W = np.zeros((rows, d))
    b = np.zeros(rows)
    lr = cfg.lr if cfg.lr is not None else 1.0 / _lipschitz(Xs, cfg.l2, rows)
    W_prev, b_prev = W.copy(), b.copy()
    for epoch in range(cfg.epochs):
        beta = epoch / (epoch + 3.0)
        Wl = W + beta * (W - W_prev)
        bl = b + beta * (b - b_prev)
        _, dW, db = logreg_loss_grad(Wl, bl, Xs, y, cfg.l2)
        if penalize_bias:
            db = db + cfg.l2 * bl
        W_prev, b_prev = W, b
        W = Wl - lr * dW
        b = bl - lr * db
    return W, b


def train_logreg(population: Population, cfg: TrainConfig) -> LinearModel:
    """L2-regularised logistic regression (sigmoid for p=2, softmax otherwise).

    Features are standardised before fitting and the penalty acts on the
    standardised weights, as in a scaler + logistic-regression pipeline.
    """
    X, y = _check_training_data(population.X, population.y, population.p)
    rows = 1 if population.p == 2 else population.p
    mu, sd = _standardizer(X)
    W, b = _fit_linear((X - mu) / sd, y, rows, cfg)
    W, b = _fold_affine(W, b, mu, sd)
    return LinearModel(W, b, population.p, cfg)


def _glorot(rng, fan_out, fan_in):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


def train_mlp(population: Population, cfg: TrainConfig) -> MLPModel:
    """One hidden ReLU layer of ``cfg.hidden`` units, softmax output.

    ``optimizer="adam"`` runs seeded mini-batch Adam; ``"gd"`` full-batch
    gradient descent. Zero epochs return the random initialisation.
    """
    if cfg.hidden is None:
        raise ValidationError("train_mlp needs cfg.hidden")
    X, y = _check_training_data(population.X, population.y, population.p)
    p, d, h = population.p, X.shape[1], cfg.hidden
    rng = np.random.default_rng(cfg.seed)
    mu, sd = _standardizer(X)
    Xs = (X - mu) / sd
    params = [*_glorot(rng, h, d), *_glorot(rng, p, h)]
    n = len(y)
    if cfg.optimizer == "adam":
        lr = 1e-3 if cfg.lr is None else cfg.lr
        batch = min(cfg.batch_size or 200, n)
        m1 = [np.zeros_like(a) for a in params]
        m2 = [np.zeros_like(a) for a in params]
        beta1, beta2, eps, step = 0.9, 0.999, 1e-8, 0
        Xs32 = Xs.astype(np.float32)
        params = [a.astype(np.float32) for a in params]
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                _, grads = mlp_loss_grad(params, Xs32[idx], y[idx], cfg.l2)
                step += 1
                corr = math.sqrt(1 - beta2 ** step) / (1 - beta1 ** step)
                for i, g in enumerate(grads):
                    m1[i] = beta1 * m1[i] + (1 - beta1) * g
                    m2[i] = beta2 * m2[i] + (1 - beta2) * g * g
                    params[i] = params[i] - (lr * corr) * m1[i] / (np.sqrt(m2[i]) + eps)
        params = [a.astype(float) for a in params]
    else:
        lr = 0.1 if cfg.lr is None else cfg.lr
        for _ in range(cfg.epochs):
            _, grads = mlp_loss_grad(params, Xs, y, cfg.l2)
            params = [a - lr * g for a, g in zip(params, grads)]
    W1, b1 = _fold_affine(params[0], params[1], mu, sd)
    return MLPModel(W1, b1, params[2], params[3], cfg)


def minmax_scale_rows(X, lo, hi, max_norm):
    """Min-max scale columns to [0, 1] and clip row norms to ``max_norm``."""
    span = np.where(hi > lo, hi - lo, 1.0)
    Xs = np.clip((X - lo) / span, 0.0, 1.0)
    norms = np.linalg.norm(Xs, axis=1)
    factor = np.where(norms > max_norm, max_norm / np.where(norms > 0, norms, 1.0), 1.0)
    return Xs * factor[:, None], span


def dp_noise(rng, dim, scale):
    """Vector with density proportional to ``exp(-||v|| / scale)``."""
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return rng.gamma(shape=dim, scale=scale) * direction


def train_dp_logreg(population: Population, cfg: TrainConfig) -> LinearModel:
    """epsilon-DP binary logistic regression by output perturbation.

    Features are min-max scaled with row norms capped at ``sqrt(d)``; an
    intercept column of ones is appended, so every row has norm at most
    ``R = sqrt(d + 1)``. The penalised minimiser has L2 sensitivity
    ``2 R / (n * l2)``; noise with density ``exp(-||v|| / scale)`` and
    ``scale = 2 R / (n * l2 * epsilon)`` is added to the weights.
    """
    if cfg.dp_epsilon is None or cfg.dp_epsilon <= 0:
        raise ValidationError("DP training needs a positive epsilon")
    if cfg.l2 <= 0:
        raise ValidationError("DP training needs l2 > 0 (sensitivity is unbounded otherwise)")
    if population.p != 2:
        raise ValidationError("DP logistic regression supports binary tasks only")
    X, y = _check_training_data(population.X, population.y, population.p)
    n, d = X.shape
    lo, hi = X.min(axis=0), X.max(axis=0)
    Xs, span = minmax_scale_rows(X, lo, hi, math.sqrt(d))
    W, b = _fit_linear(Xs, y, 1, cfg, penalize_bias=True)
    radius = math.sqrt(d + 1)
    rng = np.random.default_rng(cfg.seed)
    noise = dp_noise(rng, d + 1, 2.0 * radius / (n * cfg.l2 * cfg.dp_epsilon))
    W = W + noise[:d]
    b = b + noise[d]
    W, b = _fold_affine(W, b, lo, span)
    return LinearModel(W, b, 2, cfg)


# -- equalized odds -------------------------------------------------------------------

class InfeasibleError(AuditError):
    def __init__(self, message, best_gap):
        super().__init__(message)
        self.best_gap = best_gap


@dataclasses.dataclass(frozen=True, eq=False)
class EOPolicy:
    """Per-group mixture of a thresholded score with the constants 0 and 1.

    ``weights[z] = (w_threshold, w_zero, w_one)``; acceptance probability is
    ``w_threshold * 1[score >= thresholds[z]] + w_one``.
    """

    thresholds: np.ndarray
    weights: np.ndarray
    target: tuple  # common (FPR, TPR)

    def accept_probability(self, scores, z) -> np.ndarray:
        scores = np.asarray(scores, dtype=float)
        z = np.asarray(z, dtype=np.int64)
        above = scores >= self.thresholds[z]
        q = self.weights[z, 0] * above + self.weights[z, 2]
        return np.clip(q, 0.0, 1.0)


def _rates(scores, y, thresholds):
    pos, neg = scores[y == 1], scores[y == 0]
    tpr = (pos[None, :] >= thresholds[:, None]).mean(axis=1)
    fpr = (neg[None, :] >= thresholds[:, None]).mean(axis=1)
    return fpr, tpr


def _upper_envelope(F, T, f):
    """Highest TPR reachable at FPR ``f`` by mixing (F, T) with the constants."""
    F, T = F[:, None], T[:, None]
    left = np.where(F > 0, T * f / np.where(F > 0, F, 1.0), T)
    right = np.where(F < 1, T + (1 - T) * (f - F) / np.where(F < 1, 1 - F, 1.0), T)
    env = np.where(f <= F, left, right)
    return np.maximum(env.max(axis=0), f)


def _mixture(F, T, f, t, eps=1e-12):
    """Best (largest classifier weight) barycentric mix reaching (f, t), or None."""
    best = None
    for i in range(len(F)):
        if abs(T[i] - F[i]) < eps:
            if abs(t - f) > eps:
                continue
            a = 0.0
        else:
            a = (t - f) / (T[i] - F[i])
        c = f - a * F[i]
        if a < -eps or c < -eps or a + c > 1 + eps:
            continue
        a, c = max(a, 0.0), max(c, 0.0)
        if best is None or a > best[1] + eps:
            best = (i, a, c)
    return best


def eo_postprocess(scores, y, z, k=None, threshold_grid=None, tol=1e-9) -> EOPolicy:
    """Equalized-odds post-processing of binary scores on calibration data.

    The common (FPR, TPR) target minimising overall error is searched over all
    attainable FPRs of every group plus a uniform grid; each group then
    reaches it by mixing its own thresholded score with the two constant
    classifiers.

    Raises:
        ValidationError: labels are not binary or a group lacks a class.
        InfeasibleError: the realised group rates differ by more than ``tol``.
    """
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64)
    if np.any((y != 0) & (y != 1)):
        raise ValidationError("equalized-odds post-processing needs binary labels")
    k = int(z.max()) + 1 if k is None else k
    groups = [g for g in range(k) if np.any(z == g)]
    for g in groups:
        if len(np.unique(y[z == g])) < 2:
            raise ValidationError(f"group {g} lacks positives or negatives")
    if threshold_grid is None:
        threshold_grid = np.unique(np.quantile(scores, np.linspace(0, 1, 201)))
    grid = np.append(np.sort(np.asarray(threshold_grid, dtype=float)), np.inf)

    curves = {g: _rates(scores[z == g], y[z == g], grid) for g in groups}
    candidates = np.unique(np.concatenate(
        [np.linspace(0, 1, 2001)] + [curves[g][0] for g in groups]))
    envelope = np.min([_upper_envelope(*curves[g], candidates) for g in groups], axis=0)
    neg_rate, pos_rate = np.mean(y == 0), np.mean(y == 1)
    error = neg_rate * candidates + pos_rate * (1 - envelope)
    best = int(np.argmin(error + 1e-12 * (1 - envelope)))
    f_star, t_star = float(candidates[best]), float(envelope[best])

    thresholds = np.full(k, np.inf)
    weights = np.zeros((k, 3))
    weights[:, 1] = 1.0
    for g in groups:
        F, T = curves[g]
        mix = _mixture(F, T, f_star, t_star)
        if mix is None:
            raise InfeasibleError(f"group {g} cannot reach the common target", best_gap=np.inf)
        i, a, c = mix
        thresholds[g] = grid[i]
        weights[g] = (a, max(0.0, 1.0 - a - c), c)
    policy = EOPolicy(thresholds, weights, (f_star, t_star))

    q = policy.accept_probability(scores, z)
    fprs = [q[(z == g) & (y == 0)].mean() for g in groups]
    tprs = [q[(z == g) & (y == 1)].mean() for g in groups]
    gap = max(max(fprs) - min(fprs), max(tprs) - min(tprs))
    if gap > tol:
        raise InfeasibleError(f"equalized odds not reached: rate gap {gap:.4f}", best_gap=gap)
    return policy


@dataclasses.dataclass(frozen=True, eq=False)
class EOModel:
    """Binary base model whose positive-class score is passed through an EO policy."""

    base: LinearModel | MLPModel
    policy: EOPolicy

    @property
    def n_features(self):
        return self.base.n_features

    @property
    def p(self):
        return 2

    def confidence(self, X, z):
        if z is None:
            raise ValidationError("the equalized-odds model needs subgroups")
        scores = predict_confidence(self.base, X)[:, 1]
        q = self.policy.accept_probability(scores, z)
        return np.column_stack([1.0 - q, q])


def train_eo_logreg(population: Population, cfg: TrainConfig) -> EOModel:
    base = train_logreg(population, cfg)
    scores = predict_confidence(base, population.X)[:, 1]
    policy = eo_postprocess(scores, population.y, population.z, k=population.k)
    return EOModel(base, policy)


# -- persistence ----------------------------------------------------------------------

def model_to_dict(model) -> dict:
    def arr(a):
        a = np.asarray(a, dtype=float)
        return {"shape": list(a.shape), "data": a.ravel().tolist()}

    def cfg(c):
        return None if c is None else dataclasses.asdict(c)

    if isinstance(model, LinearModel):
        return {"kind": "linear", "p": model.p, "weights": arr(model.weights),
                "bias": arr(model.bias), "config": cfg(model.config)}
    if isinstance(model, MLPModel):
        return {"kind": "mlp", "hidden_weights": arr(model.hidden_weights),
                "hidden_bias": arr(model.hidden_bias), "output_weights": arr(model.output_weights),
                "output_bias": arr(model.output_bias), "config": cfg(model.config)}
    if isinstance(model, EOModel):
        thresholds = [None if np.isinf(t) else float(t) for t in model.policy.thresholds]
        return {"kind": "eo", "base": model_to_dict(model.base), "thresholds": thresholds,
                "weights": arr(model.policy.weights), "target": list(model.policy.target)}
    raise ValidationError(f"cannot serialise {type(model).__name__}")


def model_from_dict(data: dict):
    def arr(d):
        return np.asarray(d["data"], dtype=float).reshape(d["shape"])

    def cfg(c):
        return None if c is None else TrainConfig(**c)

    kind = data.get("kind")
    if kind == "linear":
        return LinearModel(arr(data["weights"]), arr(data["bias"]), data["p"], cfg(data["config"]))
    if kind == "mlp":
        return MLPModel(arr(data["hidden_weights"]), arr(data["hidden_bias"]),
                        arr(data["output_weights"]), arr(data["output_bias"]), cfg(data["config"]))
    if kind == "eo":
        thresholds = np.array([np.inf if t is None else t for t in data["thresholds"]])
        policy = EOPolicy(thresholds, arr(data["weights"]), tuple(data["target"]))
        return EOModel(model_from_dict(data["base"]), policy)
    raise ValidationError(f"unknown model kind {kind!r}")


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
