"""Backbone predictive models.

Three probability targets share one treatment-effect form
``sigmoid(C * sigmoid(W1 x + b1) * d + W2 x + b2)``: in-range probability w,
in-range completion f_in, and end-to-end completion z. A small two-layer
perceptron predicts per-sample Beta parameters used to seed the in-range-rate
tracker. All gradients are analytic (see tests for the finite-difference
checks) and optimized with Adam at lr 0.02 for 50 epochs.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .nets import Adam, init_mlp, mlp_backward, mlp_forward, sigmoid, softplus
from .simulator import LoggedData

PROB_EPS = 1e-6
TARGETS = ("w", "f_in", "z", "beta")

CHECKPOINT_MAGIC = b"RGCKPT01"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    epochs: int = 50
    batch_size: int = 256

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, epochs and batch_size must be positive")


class FeatureScaler:
    """Zero-mean unit-variance transform frozen from pretrain statistics."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureScaler":
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.mean.size:
            raise ValueError(f"expected {self.mean.size} features, got {x.shape[1]}")
        return (x - self.mean) / self.std


def _check_dataset(x, d, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != d.size or d.size != y.size or d.size == 0:
        raise ValueError("dataset arrays must be nonempty and aligned")
    if np.unique(d).size < 2:
        warnings.warn("dataset has a single coupon level; treatment effect is unidentifiable")
    return x, d, y


class LogisticUpliftModel:
    """Logistic treatment-effect model with a final logit link."""

    def __init__(self, scaler: FeatureScaler, params: list[np.ndarray], target: str = "z"):
        self.scaler = scaler
        self.params = params  # [w1 (D,), b1 (1,), w2 (D,), b2 (1,), c (1,)]
        self.target = target

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scaler: FeatureScaler, target: str):
        scale = 1.0 / np.sqrt(dim)
        params = [
            rng.normal(0.0, scale, size=dim),
            np.zeros(1),
            rng.normal(0.0, scale, size=dim),
            np.zeros(1),
            np.ones(1),  # scaling constant C, trainable from 1.0
        ]
        return cls(scaler, params, target)

    def logits(self, x: np.ndarray, d) -> np.ndarray:
        xs = self.scaler.transform(x)
        d = np.broadcast_to(np.asarray(d, dtype=float), (xs.shape[0],))
        w1, b1, w2, b2, c = self.params
        gate = sigmoid(xs @ w1 + b1[0])
        return c[0] * gate * d + xs @ w2 + b2[0]

    def predict(self, x: np.ndarray, d) -> np.ndarray:
        """Probabilities clipped to [eps, 1 - eps]."""
        return np.clip(sigmoid(self.logits(x, d)), PROB_EPS, 1.0 - PROB_EPS)

    def predict_matrix(self, x: np.ndarray, coupon_values: np.ndarray) -> np.ndarray:
        """(N, H) predictions over a coupon grid."""
        xs = self.scaler.transform(x)
        w1, b1, w2, b2, c = self.params
        gate = sigmoid(xs @ w1 + b1[0])
        base = xs @ w2 + b2[0]
        logits = c[0] * gate[:, None] * np.asarray(coupon_values)[None, :] + base[:, None]
        return np.clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)

    def save(self, path):
        save_checkpoint(
            path,
            kind="logistic_uplift",
            arrays={
                "w1": self.params[0],
                "b1": self.params[1],
                "w2": self.params[2],
                "b2": self.params[3],
                "c": self.params[4],
                "feat_mean": self.scaler.mean,
                "feat_std": self.scaler.std,
            },
            meta={"target": self.target},
        )

    @classmethod
    def load(cls, path) -> "LogisticUpliftModel":
        kind, arrays, meta = load_checkpoint(path)
        if kind != "logistic_uplift":
            raise ValueError(f"checkpoint holds a {kind!r} model")
        scaler = FeatureScaler(arrays["feat_mean"], arrays["feat_std"])
        params = [arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], arrays["c"]]
        return cls(scaler, params, meta.get("target", "z"))


def logistic_loss_grads(params: list[np.ndarray], xs: np.ndarray, d: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its analytic parameter gradients."""
    w1, b1, w2, b2, c = params
    n = y.size
    u = xs @ w1 + b1[0]
    gate = sigmoid(u)
    logit = c[0] * gate * d + xs @ w2 + b2[0]
    loss = float(np.mean(softplus(logit) - y * logit))
    dlogit = (sigmoid(logit) - y) / n
    dgate = dlogit * c[0] * d
    du = dgate * gate * (1.0 - gate)
    grads = [
        xs.T @ du,
        np.array([du.sum()]),
        xs.T @ dlogit,
        np.array([dlogit.sum()]),
        np.array([(dlogit * gate * d).sum()]),
    ]
    return loss, grads


def fit_logistic(
    dataset: tuple[np.ndarray, np.ndarray, np.ndarray],
    config: TrainConfig,
    target: str = "z",
    rng: np.random.Generator | None = None,
) -> LogisticUpliftModel:
    """Train a logistic uplift model on (features, coupon, binary label) triples."""
    x, d, y = _check_dataset(*dataset)
    rng = rng or np.random.default_rng(0)
    scaler = FeatureScaler.fit(x)
    xs = scaler.transform(x)
    model = LogisticUpliftModel.init(x.shape[1], rng, scaler, target)
    opt = Adam(model.params, lr=config.learning_rate)
    n = y.size
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start : start + config.batch_size]
            _, grads = logistic_loss_grads(model.params, xs[sel], d[sel], y[sel])
            opt.step(grads)
    return model


def predict(model, x: np.ndarray, d) -> np.ndarray:
    """Spec-level prediction entry point; dispatches on the model type."""
    return model.predict(x, d)


class BetaParamModel:
    """Two-layer perceptron emitting positive (alpha, beta) per (x, coupon)."""

    HIDDEN = 32
    PARAM_FLOOR = 1e-3

    def __init__(self, scaler: FeatureScaler, params: list[np.ndarray], anchor: float):
        self.scaler = scaler
        self.params = params
        self.anchor = anchor  # concentration alpha+beta is pulled toward this

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scaler: FeatureScaler, anchor: float):
        params = init_mlp([dim + 1, cls.HIDDEN, 2], rng, out_bias=[1.0, 1.0])
        return cls(scaler, params, anchor)

    def _inputs(self, x: np.ndarray, d) -> np.ndarray:
        xs = self.scaler.transform(x)
        d = np.broadcast_to(np.asarray(d, dtype=float), (xs.shape[0],))
        return np.column_stack([xs, d])

    def predict(self, x: np.ndarray, d) -> tuple[np.ndarray, np.ndarray]:
        out, _ = mlp_forward(self.params, self._inputs(x, d))
        ab = softplus(out) + self.PARAM_FLOOR
        return ab[:, 0], ab[:, 1]

    def predict_matrix(self, x: np.ndarray, coupon_values) -> tuple[np.ndarray, np.ndarray]:
        """(N, H) alpha and beta over a coupon grid."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        coupon_values = np.asarray(coupon_values, dtype=float)
        h = coupon_values.size
        tiled_x = np.repeat(x, h, axis=0)
        tiled_d = np.tile(coupon_values, n)
        alpha, beta = self.predict(tiled_x, tiled_d)
        return alpha.reshape(n, h), beta.reshape(n, h)

    def save(self, path):
        arrays = {f"p{i}": p for i, p in enumerate(self.params)}
        arrays["feat_mean"] = self.scaler.mean
        arrays["feat_std"] = self.scaler.std
        save_checkpoint(path, kind="beta_mlp", arrays=arrays, meta={"anchor": self.anchor})

    @classmethod
    def load(cls, path) -> "BetaParamModel":
        kind, arrays, meta = load_checkpoint(path)
        if kind != "beta_mlp":
            raise ValueError(f"checkpoint holds a {kind!r} model")
        scaler = FeatureScaler(arrays.pop("feat_mean"), arrays.pop("feat_std"))
        params = [arrays[f"p{i}"] for i in range(len(arrays))]
        return cls(scaler, params, float(meta["anchor"]))


def beta_loss_grads(
    params: list[np.ndarray],
    inputs: np.ndarray,
    y: np.ndarray,
    anchor: float,
    anchor_weight: float = 0.02,
):
    """Bernoulli NLL through the Beta mean, plus a soft concentration anchor."""
    n = y.size
    out, acts = mlp_forward(params, inputs)
    sp = softplus(out)
    ab = sp + BetaParamModel.PARAM_FLOOR
    alpha, beta = ab[:, 0], ab[:, 1]
    nu = alpha + beta
    log_gap = np.log(nu) - np.log(anchor)
    loss = float(
        np.mean(-y * np.log(alpha) - (1.0 - y) * np.log(beta) + np.log(nu))
        + anchor_weight * np.mean(log_gap**2)
    )
    d_common = (1.0 / nu + anchor_weight * 2.0 * log_gap / nu) / n
    d_alpha = -y / alpha / n + d_common
    d_beta = -(1.0 - y) / beta / n + d_common
    grad_out = np.column_stack([d_alpha, d_beta]) * sigmoid(out)  # through softplus
    grads, _ = mlp_backward(params, acts, grad_out)
    return loss, grads


def fit_beta_param_model(
    dataset: tuple[np.ndarray, np.ndarray, np.ndarray],
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    anchor: float = 6.0,
) -> BetaParamModel:
    """Train the Beta-parameter perceptron on (features, coupon, in-range) triples."""
    x, d, y = _check_dataset(*dataset)
    rng = rng or np.random.default_rng(0)
    scaler = FeatureScaler.fit(x)
    model = BetaParamModel.init(x.shape[1], rng, scaler, anchor)
    inputs = model._inputs(x, d)
    opt = Adam(model.params, lr=config.learning_rate)
    n = y.size
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start : start + config.batch_size]
            _, grads = beta_loss_grads(model.params, inputs[sel], y[sel], anchor)
            opt.step(grads)
    return model


def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC with midrank tie handling."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: dataset has a single label class")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_auc(model, dataset: tuple[np.ndarray, np.ndarray, np.ndarray]) -> float:
    x, d, y = dataset
    if isinstance(model, BetaParamModel):
        alpha, beta = model.predict(x, d)
        scores = alpha / (alpha + beta)
    else:
        scores = model.predict(x, d)
    return auc_score(y, scores)


def build_target_dataset(log: LoggedData, coupons, target: str):
    """Assemble (x, coupon value, label) triples for one model target."""
    coupons = np.asarray(coupons, dtype=float)
    d_values = coupons[log.coupon_index]
    if target in ("w", "beta"):
        return log.features, d_values, log.y_in.astype(float)
    if target == "z":
        return log.features, d_values, log.y_complete.astype(float)
    if target == "f_in":
        mask = log.y_in
        return log.features[mask], d_values[mask], log.y_complete[mask].astype(float)
    raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")


def train_target(
    log: LoggedData,
    coupons,
    target: str,
    config: TrainConfig | None = None,
    seed: int = 0,
    anchor: float | None = None,
):
    """Train one named target on a logged split."""
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    dataset = build_target_dataset(log, coupons, target)
    if target == "beta":
        return fit_beta_param_model(dataset, config, rng, anchor=anchor or 6.0)
    return fit_logistic(dataset, config, target=target, rng=rng)


# -- checkpoint container ----------------------------------------------------


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned binary container: 8-byte magic, JSON shape manifest, raw data."""
    manifest = {
        "kind": kind,
        "version": CHECKPOINT_VERSION,
        "arrays": [
            {"name": name, "shape": list(np.asarray(a).shape), "dtype": "<f8"}
            for name, a in arrays.items()
        ],
        "meta": meta,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        arrays = {}
        for spec in manifest["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return manifest["kind"], arrays, manifest["meta"]
