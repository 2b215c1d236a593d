"""MSE training loop with Adam, early stopping, evaluation, synthetic data.

Training is bit-deterministic under a fixed seed: shuffling uses one seeded
generator, parameter updates run in a fixed tensor order, and epoch logs
contain only deterministic fields.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ndkernel as nd
from .corpus import PreparedData, RawRecord
from .model import (HyperParams, ParamSet, build_lfm_node, build_rating_node,
                    init_params, stage_params)

MODELS = ("half", "lfm")


class DivergenceError(ArithmeticError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    model: str = "half"
    clip_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience",
                     "adam_beta1", "adam_beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.clip_grad_norm < 0:
            raise ValueError("clip_grad_norm cannot be negative")


@dataclass
class AdamState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls(first={k: np.zeros_like(v) for k, v in params.items()},
                   second={k: np.zeros_like(v) for k, v in params.items()})


@dataclass
class EpochReport:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float

    def log_line(self) -> str:
        # wall-clock time is excluded so logs are reproducible byte for byte
        return json.dumps({"epoch": self.epoch, "train_mse": self.train_mse,
                           "val_mse": self.val_mse})


def mse_loss(predictions, targets) -> float:
    """Mean squared error between two equal-length vectors."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise ValueError(f"mse_loss needs equal-length vectors, got "
                         f"{predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise ValueError("mse_loss over zero predictions is undefined")
    diff = predictions - targets
    return float(diff @ diff / predictions.size)


def _mse_node(tape: nd.Tape, prediction_nodes: list, targets: np.ndarray):
    preds = nd.stack_scalars(prediction_nodes)
    diff = nd.sub(preds, tape.constant(targets))
    return nd.scale(nd.sum_all(nd.hadamard(diff, diff)), 1.0 / len(prediction_nodes))


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """One Adam update with bias correction, in place on `params`.

    Frozen entries (the PAD embedding row) have their gradient zeroed before
    the moment update, so they never move.
    """
    state.step += 1
    t = state.step
    b1, b2, eps, lr = (config.adam_beta1, config.adam_beta2,
                       config.adam_eps, config.learning_rate)
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name in params.frozen:
            g = np.where(params.frozen[name], 0.0, g)
        m = state.first[name] = b1 * state.first[name] + (1.0 - b1) * g
        v = state.second[name] = b2 * state.second[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params.tensors[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)


def _dense_triples(interactions, user_index, item_index):
    return [(user_index[x.user_id], item_index[x.item_id], x.rating, x)
            for x in interactions]


def _batch_loss_and_grads(params, hp, cfg, batch, data):
    tape = nd.Tape()
    leaves = stage_params(tape, params, trainable=True)
    pred_nodes = []
    for u, i, _, inter in batch:
        if cfg.model == "half":
            node, _ = build_rating_node(tape, leaves, hp, u, i,
                                        data.user_bundles[u], data.item_bundles[i])
        else:
            node = build_lfm_node(tape, leaves, u, i)
        pred_nodes.append(node)
    targets = np.array([r for _, _, r, _ in batch])
    loss = _mse_node(tape, pred_nodes, targets)
    grads_out = nd.backward(tape, loss)
    grads = {name: grads_out.of(leaves[name]) for name in params.tensors}
    return float(loss.value), grads


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor


def evaluate(params: ParamSet, interactions, data, hp: HyperParams,
             model: str = "half") -> float:
    """Mean squared error over the given interactions; mutates nothing."""
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    preds, targets = [], []
    for u, i, rating, _ in _dense_triples(interactions, data.user_index, data.item_index):
        if model == "half":
            tape = nd.Tape()
            leaves = stage_params(tape, params, trainable=False)
            node, _ = build_rating_node(tape, leaves, hp, u, i,
                                        data.user_bundles[u], data.item_bundles[i])
            preds.append(float(node.value))
        else:
            preds.append(float(params["user_factors"][u] @ params["item_factors"][i]
                               + params["user_bias"][u] + params["item_bias"][i]
                               + params["global_bias"]))
        targets.append(rating)
    return mse_loss(preds, targets)


def train(data: PreparedData, hp: HyperParams, cfg: TrainConfig,
          log_stream=None, init: ParamSet | None = None):
    """Train on `data.train`, early-stopping on validation MSE.

    Returns (best-validation ParamSet, per-epoch reports). With an empty
    validation split, train MSE drives model selection instead. Divergence
    (non-finite loss) aborts with the offending batch index.
    """
    if not data.train:
        raise ValueError("cannot train on an empty train split")
    rng = np.random.default_rng(cfg.seed)
    global_mean = float(np.mean([x.rating for x in data.train]))
    params = init.copy() if init is not None else init_params(
        hp, cfg.seed, global_mean, len(data.user_index), len(data.item_index))
    state = AdamState.zeros_like(params)
    triples = _dense_triples(data.train, data.user_index, data.item_index)

    best_params = params.copy()
    best_val = np.inf
    epochs_since_best = 0
    reports: list[EpochReport] = []

    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        order = rng.permutation(len(triples))
        sq_err_sum = 0.0
        for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [triples[j] for j in order[start:start + cfg.batch_size]]
            try:
                loss, grads = _batch_loss_and_grads(params, hp, cfg, batch, data)
            except nd.NonFiniteError as err:
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}, batch {batch_idx}") from err
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}, batch {batch_idx}")
            if cfg.clip_grad_norm > 0:
                _clip_grads(grads, cfg.clip_grad_norm)
            adam_step(params, grads, state, cfg)
            sq_err_sum += loss * len(batch)
        train_mse = sq_err_sum / len(triples)
        if data.validation:
            val_mse = evaluate(params, data.validation, data, hp, cfg.model)
        else:
            val_mse = train_mse
        report = EpochReport(epoch, train_mse, val_mse, time.perf_counter() - started)
        reports.append(report)
        if log_stream is not None:
            log_stream.write(report.log_line() + "\n")
        if val_mse < best_val:
            best_val = val_mse
            best_params = params.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break
    return best_params, reports


# ---------------------------------------------------------------------------
# synthetic data generation

SENTIMENT_WORDS = ("terrible", "bad", "fine", "good", "superb")
USER_TRAIT_WORDS = ("breezy", "stern")  # positive / negative user trait
ITEM_TRAIT_WORDS = ("crisp", "murky")  # positive / negative item trait


@dataclass
class SyntheticDataset:
    records: list[RawRecord]
    meta: dict = field(default_factory=dict)


def make_synthetic(seed: int, users: int, items: int, vocab_words: int,
                   noise_sd: float, interactions_per_user: int = 20,
                   trait_weight: float = 0.5) -> SyntheticDataset:
    """Plant a 4-factor rating model plus a text-visible trait interaction.

    Ratings come from factors, biases and Gaussian noise, plus
    trait_weight * h_u * k_i for binary entity traits h, k. Every review
    spells out its writer's trait and its subject's trait through dedicated
    words, and carries sentiment words whose distribution peaks at the
    review's own rounded rating, so models that read reviews have strictly
    more signal than the rating matrix alone provides.
    """
    n_special = len(SENTIMENT_WORDS) + len(USER_TRAIT_WORDS) + len(ITEM_TRAIT_WORDS)
    if vocab_words < n_special + 1:
        raise ValueError(f"vocab_words must be at least {n_special + 1}")
    if users < 1 or items < 1 or interactions_per_user < 1:
        raise ValueError("users, items and interactions_per_user must be positive")
    rng = np.random.default_rng(seed)
    factor_dim = 4
    mean_rating = 3.5
    filler = [f"filler{i:03d}" for i in range(vocab_words - n_special)]

    user_bias = rng.normal(0.0, 0.25, size=users)
    item_bias = rng.normal(0.0, 0.25, size=items)
    user_factors = rng.normal(0.0, 0.35, size=(users, factor_dim))
    item_factors = rng.normal(0.0, 0.35, size=(items, factor_dim))
    user_trait = rng.choice([-1, 1], size=users)
    item_trait = rng.choice([-1, 1], size=items)

    records = []
    for u in range(users):
        chosen = rng.choice(items, size=min(interactions_per_user, items), replace=False)
        for i in chosen:
            rating = (mean_rating + user_bias[u] + item_bias[i]
                      + user_factors[u] @ item_factors[i]
                      + trait_weight * user_trait[u] * item_trait[i]
                      + rng.normal(0.0, noise_sd))
            level = int(np.clip(round(rating), 1, 5)) - 1
            sentiment_probs = np.full(5, 0.1)
            sentiment_probs[level] = 0.6
            if level > 0:
                sentiment_probs[level - 1] += 0.05
            if level < 4:
                sentiment_probs[level + 1] += 0.05
            sentiment_probs /= sentiment_probs.sum()
            words = [USER_TRAIT_WORDS[0] if user_trait[u] > 0 else USER_TRAIT_WORDS[1]] * 3
            words += [ITEM_TRAIT_WORDS[0] if item_trait[i] > 0 else ITEM_TRAIT_WORDS[1]] * 3
            words += list(rng.choice(SENTIMENT_WORDS, size=3, p=sentiment_probs))
            words += list(rng.choice(filler, size=6))
            rng.shuffle(words)
            records.append(RawRecord(f"u{u:04d}", f"i{i:04d}",
                                     float(round(rating, 4)), " ".join(words)))
    meta = {
        "mean_rating": mean_rating,
        "noise_sd": noise_sd,
        "trait_weight": trait_weight,
        "factor_dim": factor_dim,
        "user_bias": user_bias.tolist(),
        "item_bias": item_bias.tolist(),
        "user_factors": user_factors.tolist(),
        "item_factors": item_factors.tolist(),
        "user_trait": user_trait.tolist(),
        "item_trait": item_trait.tolist(),
        "sentiment_words": list(SENTIMENT_WORDS),
        "user_trait_words": list(USER_TRAIT_WORDS),
        "item_trait_words": list(ITEM_TRAIT_WORDS),
    }
    return SyntheticDataset(records, meta)
