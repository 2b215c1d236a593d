"""The hierarchical-attention rating model and the plain latent-factor baseline.

Two structurally symmetric encoders (user side and item side) turn review
bundles into feature vectors: a same-padded 1-D convolution over word
embeddings, word-level attention pooling inside each review, then
review-level attention queried by the entity's latent factor vector. The
prediction head concatenates review features with latent factors per side,
multiplies the two sides elementwise, and applies a linear map plus biases
under a final relu. The baseline drops the review pathway entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndkernel as nd
from .corpus import PAD, ReviewBundle

ACTIVATIONS = {"relu": nd.relu, "tanh": nd.tanh, "sigmoid": nd.sigmoid}

MASK_LOGIT = -1e9


@dataclass(frozen=True)
class HyperParams:
    """Model shape configuration.

    attn_dim (word-attention projection size) defaults to num_filters.
    """

    vocab_size: int
    emb_dim: int = 64
    num_filters: int = 64
    window: int = 3
    review_len: int = 100
    reviews_per_entity: int = 10
    factor_dim: int = 16
    attn_dim: int = 0
    conv_activation: str = "relu"

    def __post_init__(self):
        if self.attn_dim == 0:
            object.__setattr__(self, "attn_dim", self.num_filters)
        for name in ("vocab_size", "emb_dim", "num_filters", "window",
                     "review_len", "reviews_per_entity", "factor_dim", "attn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be at least 3 (PAD, UNK, one token)")
        if self.window % 2 == 0:
            raise ValueError(f"window must be odd, got {self.window}")
        if self.conv_activation not in ACTIVATIONS:
            raise ValueError(f"unknown conv_activation {self.conv_activation!r}")


PARAM_ORDER = (
    "word_emb",
    "conv_w_user", "conv_b_user",
    "word_attn_proj_user", "word_attn_query_user",
    "review_attn_user",
    "conv_w_item", "conv_b_item",
    "word_attn_proj_item", "word_attn_query_item",
    "review_attn_item",
    "user_factors", "item_factors",
    "user_bias", "item_bias",
    "global_bias",
    "fuse_w",
)


def param_shapes(hp: HyperParams, n_users: int, n_items: int) -> dict[str, tuple]:
    V, D, K, w = hp.vocab_size, hp.emb_dim, hp.num_filters, hp.window
    a, f = hp.attn_dim, hp.factor_dim
    shapes = {
        "word_emb": (V, D),
        "user_factors": (n_users, f), "item_factors": (n_items, f),
        "user_bias": (n_users,), "item_bias": (n_items,),
        "global_bias": (),
        "fuse_w": (1, K + f),
    }
    for side in ("user", "item"):
        shapes[f"conv_w_{side}"] = (K, D, w)
        shapes[f"conv_b_{side}"] = (K,)
        shapes[f"word_attn_proj_{side}"] = (a, K)
        shapes[f"word_attn_query_{side}"] = (a,)
        shapes[f"review_attn_{side}"] = (f, K)
    return shapes


class ParamSet:
    """Every learnable tensor of the model, named and ordered.

    `frozen` maps tensor names to boolean masks of entries that must never
    be updated (the PAD embedding row).
    """

    def __init__(self, tensors: dict[str, np.ndarray], frozen: dict[str, np.ndarray] | None = None):
        self.tensors = tensors
        self.frozen = frozen or {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    @property
    def n_users(self) -> int:
        return self.tensors["user_factors"].shape[0]

    @property
    def n_items(self) -> int:
        return self.tensors["item_factors"].shape[0]

    def total_size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()},
                        {k: v.copy() for k, v in self.frozen.items()})


def _glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(hp: HyperParams, seed: int, global_mean_rating: float,
                n_users: int, n_items: int) -> ParamSet:
    """Deterministic initialization: uniform(-s, s) weights, zero biases.

    s = sqrt(6 / (fan_in + fan_out)) per tensor; the global bias starts at
    the mean train rating so the final relu opens on a positive
    pre-activation; the PAD embedding row is zeroed and frozen.
    """
    D, K, w = hp.emb_dim, hp.num_filters, hp.window
    a, f = hp.attn_dim, hp.factor_dim
    fans = {
        "word_emb": (hp.vocab_size, D),
        "user_factors": (n_users, f), "item_factors": (n_items, f),
        "fuse_w": (K + f, 1),
    }
    for side in ("user", "item"):
        fans[f"conv_w_{side}"] = (D * w, K * w)
        fans[f"word_attn_proj_{side}"] = (K, a)
        fans[f"word_attn_query_{side}"] = (a, 1)
        fans[f"review_attn_{side}"] = (K, f)

    rng = np.random.default_rng(seed)
    shapes = param_shapes(hp, n_users, n_items)
    tensors = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name in fans:
            s = _glorot_limit(*fans[name])
            tensors[name] = rng.uniform(-s, s, size=shape)
        elif name == "global_bias":
            tensors[name] = np.asarray(float(global_mean_rating))
        else:
            tensors[name] = np.zeros(shape)
    tensors["word_emb"][PAD, :] = 0.0
    frozen_emb = np.zeros(shapes["word_emb"], dtype=bool)
    frozen_emb[PAD, :] = True
    return ParamSet(tensors, {"word_emb": frozen_emb})


@dataclass
class Prediction:
    """Model output with the attention weights that produced it.

    Attention rows for padding reviews are all-zero; within real reviews,
    PAD word positions carry exactly zero weight.
    """

    rating: float
    word_attn_user: np.ndarray  # N x T
    word_attn_item: np.ndarray  # N x T
    review_attn_user: np.ndarray  # N
    review_attn_item: np.ndarray  # N


@dataclass
class EncodedReview:
    features: np.ndarray  # K
    word_attention: np.ndarray  # T
    is_empty: bool = False


# ---------------------------------------------------------------------------
# tape builders (shared by inference and training)

def stage_params(tape: nd.Tape, params: ParamSet, trainable: bool = True) -> dict:
    """Put every parameter tensor on a tape as a leaf, keyed by name."""
    return {name: tape.leaf(arr, requires_grad=trainable)
            for name, arr in params.tensors.items()}


def _word_context(tape, leaves, side):
    # qw^T A is shared by every review on the tape; memoize per side
    key = f"_word_ctx_{side}"
    if key not in leaves:
        leaves[key] = nd.vecmat(leaves[f"word_attn_query_{side}"],
                                leaves[f"word_attn_proj_{side}"])
    return leaves[key]


def _encode_review_nodes(tape, leaves, hp, side, tokens):
    """Word-attention review encoding; requires at least one non-PAD token."""
    act = ACTIVATIONS[hp.conv_activation]
    emb = nd.embed(leaves["word_emb"], tokens)  # D x T
    feats = act(nd.conv1d(emb, leaves[f"conv_w_{side}"], leaves[f"conv_b_{side}"]))
    feats_t = nd.transpose(feats)  # T x K, word features as rows
    scores = nd.matvec(feats_t, _word_context(tape, leaves, side))
    pad_positions = tokens == PAD
    if pad_positions.any():
        offsets = np.where(pad_positions, MASK_LOGIT, 0.0)
        scores = nd.add(scores, tape.constant(offsets))
    alpha = nd.softmax(scores)
    return nd.weighted_sum(alpha, feats_t), alpha


def _review_attention_nodes(tape, leaves, hp, side, review_feats, eff_mask, query):
    """Factor-queried attention over the N review feature rows."""
    if not eff_mask.any():
        raise ValueError("review attention needs at least one unmasked review")
    stacked = nd.stack_rows(review_feats)  # N x K
    key_vec = nd.vecmat(query, leaves[f"review_attn_{side}"])  # K
    scores = nd.matvec(stacked, key_vec)
    if not eff_mask.all():
        offsets = np.where(eff_mask, 0.0, MASK_LOGIT)
        scores = nd.add(scores, tape.constant(offsets))
    beta = nd.softmax(scores)
    return nd.weighted_sum(beta, stacked), beta


def _effective_mask(bundle: ReviewBundle) -> np.ndarray:
    # a nominally real review whose tokens are all PAD carries no signal
    return bundle.review_mask & (bundle.reviews != PAD).any(axis=1)


def _encode_side_nodes(tape, leaves, hp, side, bundle, query):
    """Encode one entity's bundle into (m, beta, per-review alphas)."""
    eff_mask = _effective_mask(bundle)
    n, t = bundle.reviews.shape
    zero_feats = None
    review_feats, alphas = [], [None] * n
    for j in range(n):
        if eff_mask[j]:
            d, alpha = _encode_review_nodes(tape, leaves, hp, side, bundle.reviews[j])
            review_feats.append(d)
            alphas[j] = alpha
        else:
            if zero_feats is None:
                zero_feats = tape.constant(np.zeros(hp.num_filters))
            review_feats.append(zero_feats)
    m, beta = _review_attention_nodes(tape, leaves, hp, side, review_feats, eff_mask, query)
    return m, beta, alphas, eff_mask


def _fuse_nodes(tape, leaves, m_u, m_i, q_u, p_i, b_u, b_i):
    user_repr = nd.concat(m_u, q_u)
    item_repr = nd.concat(m_i, p_i)
    fused = nd.hadamard(user_repr, item_repr)
    wx = nd.dot(nd.take_row(leaves["fuse_w"], 0), fused)
    pre = nd.add(nd.add(nd.add(wx, b_u), b_i), leaves["global_bias"])
    return nd.relu(pre)


def build_rating_node(tape, leaves, hp, u: int, i: int,
                      user_bundle: ReviewBundle, item_bundle: ReviewBundle):
    """Full forward pass as tape nodes; returns (rating, attention nodes)."""
    q_u = nd.take_row(leaves["user_factors"], u)
    p_i = nd.take_row(leaves["item_factors"], i)
    b_u = nd.take_at(leaves["user_bias"], u)
    b_i = nd.take_at(leaves["item_bias"], i)
    m_u, beta_u, alphas_u, mask_u = _encode_side_nodes(tape, leaves, hp, "user", user_bundle, q_u)
    m_i, beta_i, alphas_i, mask_i = _encode_side_nodes(tape, leaves, hp, "item", item_bundle, p_i)
    rating = _fuse_nodes(tape, leaves, m_u, m_i, q_u, p_i, b_u, b_i)
    attn = {"beta_user": beta_u, "beta_item": beta_i,
            "alphas_user": alphas_u, "alphas_item": alphas_i}
    return rating, attn


def build_lfm_node(tape, leaves, u: int, i: int):
    """Baseline rating node: factor inner product plus biases, no relu."""
    q_u = nd.take_row(leaves["user_factors"], u)
    p_i = nd.take_row(leaves["item_factors"], i)
    b_u = nd.take_at(leaves["user_bias"], u)
    b_i = nd.take_at(leaves["item_bias"], i)
    return nd.add(nd.add(nd.add(nd.dot(q_u, p_i), b_u), b_i), leaves["global_bias"])


def _attention_matrix(attn_nodes, review_len):
    n = len(attn_nodes)
    out = np.zeros((n, review_len))
    for j, node in enumerate(attn_nodes):
        if node is not None:
            out[j] = node.value
    return out


# ---------------------------------------------------------------------------
# public operations

def encode_review(tokens, params: ParamSet, hp: HyperParams, side: str) -> EncodedReview:
    """Encode one review into a feature vector and its word attention.

    An all-PAD review has no admissible attention target; it comes back
    flagged with zero features and zero attention.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= hp.vocab_size:
        raise IndexError("token index outside the vocabulary")
    if (tokens == PAD).all():
        return EncodedReview(np.zeros(hp.num_filters), np.zeros(len(tokens)), is_empty=True)
    tape = nd.Tape()
    leaves = stage_params(tape, params, trainable=False)
    d, alpha = _encode_review_nodes(tape, leaves, hp, side, tokens)
    return EncodedReview(d.value.copy(), alpha.value.copy())


def review_attention(review_feats: np.ndarray, mask: np.ndarray,
                     query_factor: np.ndarray, attn_matrix: np.ndarray):
    """Attention over review feature rows, queried by the entity's factor vector.

    Returns (aggregated feature vector, weights); masked rows get exactly
    zero weight.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("review attention needs at least one unmasked review")
    tape = nd.Tape()
    feats = [tape.constant(row) for row in np.asarray(review_feats, dtype=np.float64)]
    stacked = nd.stack_rows(feats)
    key_vec = nd.vecmat(tape.constant(query_factor), tape.constant(attn_matrix))
    scores = nd.matvec(stacked, key_vec)
    if not mask.all():
        scores = nd.add(scores, tape.constant(np.where(mask, 0.0, MASK_LOGIT)))
    beta = nd.softmax(scores)
    m = nd.weighted_sum(beta, stacked)
    return m.value.copy(), beta.value.copy()


def lfm_predict(u: int, i: int, params: ParamSet) -> float:
    """Baseline prediction: q_u . p_i + b_u + b_i + global bias."""
    if not (0 <= u < params.n_users and 0 <= i < params.n_items):
        raise IndexError(f"unknown dense index (u={u}, i={i})")
    t = params.tensors
    return float(t["user_factors"][u] @ t["item_factors"][i]
                 + t["user_bias"][u] + t["item_bias"][i] + t["global_bias"])


def fuse_and_predict(m_u: np.ndarray, m_i: np.ndarray, u: int, i: int,
                     params: ParamSet) -> float:
    """Prediction head over precomputed review features (no attention recomputation)."""
    if not (0 <= u < params.n_users and 0 <= i < params.n_items):
        raise IndexError(f"unknown dense index (u={u}, i={i})")
    t = params.tensors
    user_repr = np.concatenate([m_u, t["user_factors"][u]])
    item_repr = np.concatenate([m_i, t["item_factors"][i]])
    pre = (t["fuse_w"][0] @ (user_repr * item_repr)
           + t["user_bias"][u] + t["item_bias"][i] + t["global_bias"])
    return float(max(pre, 0.0))


def forward(u: int, i: int, user_bundle: ReviewBundle, item_bundle: ReviewBundle,
            params: ParamSet, hp: HyperParams) -> Prediction:
    """Full deterministic forward pass for one (user, item) pair."""
    if not (0 <= u < params.n_users and 0 <= i < params.n_items):
        raise IndexError(f"unknown dense index (u={u}, i={i})")
    tape = nd.Tape()
    leaves = stage_params(tape, params, trainable=False)
    rating, attn = build_rating_node(tape, leaves, hp, u, i, user_bundle, item_bundle)
    t = hp.review_len
    return Prediction(
        rating=float(rating.value),
        word_attn_user=_attention_matrix(attn["alphas_user"], t),
        word_attn_item=_attention_matrix(attn["alphas_item"], t),
        review_attn_user=attn["beta_user"].value.copy(),
        review_attn_item=attn["beta_item"].value.copy(),
    )
