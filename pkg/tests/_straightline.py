"""Independent straight-line scalar re-implementation of the forward pass.

Used only as a test oracle: plain Python floats, explicit loops, no numpy
and no shared code with the package. Mirrors the documented semantics
(same zero padding, -1e9 attention masking, max-subtracted softmax,
effective review masks) so small instances can be compared at tight
tolerance.
"""

import math

PAD = 0
MASK_LOGIT = -1e9


def _softmax(scores):
    mx = max(scores)
    exps = [math.exp(s - mx) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def _activate(name, x):
    if name == "relu":
        return x if x > 0.0 else 0.0
    if name == "sigmoid":
        return 1.0 / (1.0 + math.exp(-x))
    if name == "tanh":
        return math.tanh(x)
    raise ValueError(name)


def encode_review(tensors, hp, side, tokens):
    """Word-attention review encoding; returns (feature list of K, alpha list of T)."""
    D = hp["emb_dim"]
    K = hp["num_filters"]
    w = hp["window"]
    a_dim = hp["attn_dim"]
    T = len(tokens)
    pad = (w - 1) // 2
    emb_table = tensors["word_emb"]
    filters = tensors[f"conv_w_{side}"]
    fbias = tensors[f"conv_b_{side}"]
    proj = tensors[f"word_attn_proj_{side}"]
    query = tensors[f"word_attn_query_{side}"]

    # convolution with zero padding, then activation
    feats = [[0.0] * T for _ in range(K)]
    for j in range(K):
        for t in range(T):
            acc = fbias[j]
            for d in range(D):
                for o in range(w):
                    src = t + o - pad
                    if 0 <= src < T:
                        acc += filters[j][d][o] * emb_table[tokens[src]][d]
            feats[j][t] = _activate(hp["conv_activation"], acc)

    # word scores g_t = sum_a query[a] * sum_k proj[a][k] * z[k][t]
    ctx = [0.0] * K
    for k in range(K):
        for r in range(a_dim):
            ctx[k] += query[r] * proj[r][k]
    scores = []
    for t in range(T):
        g = 0.0
        for k in range(K):
            g += ctx[k] * feats[k][t]
        if tokens[t] == PAD:
            g += MASK_LOGIT
        scores.append(g)
    alpha = _softmax(scores)

    d_vec = [0.0] * K
    for k in range(K):
        for t in range(T):
            d_vec[k] += alpha[t] * feats[k][t]
    return d_vec, alpha


def encode_side(tensors, hp, side, reviews, mask, query_factor):
    """Review-level attention over a bundle; returns (m list of K, beta list of N)."""
    K = hp["num_filters"]
    f_dim = hp["factor_dim"]
    attn = tensors[f"review_attn_{side}"]
    n = len(reviews)

    feats = []
    eff = []
    for j in range(n):
        real = bool(mask[j]) and any(t != PAD for t in reviews[j])
        eff.append(real)
        if real:
            d_vec, _ = encode_review(tensors, hp, side, reviews[j])
        else:
            d_vec = [0.0] * K
        feats.append(d_vec)

    key = [0.0] * K
    for k in range(K):
        for r in range(f_dim):
            key[k] += query_factor[r] * attn[r][k]
    scores = []
    for j in range(n):
        e = 0.0
        for k in range(K):
            e += key[k] * feats[j][k]
        if not eff[j]:
            e += MASK_LOGIT
        scores.append(e)
    beta = _softmax(scores)

    m_vec = [0.0] * K
    for k in range(K):
        for j in range(n):
            m_vec[k] += beta[j] * feats[j][k]
    return m_vec, beta


def rating(tensors, hp, u, i, user_reviews, user_mask, item_reviews, item_mask):
    """Full forward pass to a single predicted rating."""
    q_u = tensors["user_factors"][u]
    p_i = tensors["item_factors"][i]
    m_u, _ = encode_side(tensors, hp, "user", user_reviews, user_mask, q_u)
    m_i, _ = encode_side(tensors, hp, "item", item_reviews, item_mask, p_i)

    user_repr = list(m_u) + list(q_u)
    item_repr = list(m_i) + list(p_i)
    fuse = tensors["fuse_w"][0]
    wx = 0.0
    for z in range(len(user_repr)):
        wx += fuse[z] * (user_repr[z] * item_repr[z])
    pre = wx + tensors["user_bias"][u] + tensors["item_bias"][i] + tensors["global_bias"]
    return pre if pre > 0.0 else 0.0


def as_plain(params_tensors):
    """Convert a dict of numpy arrays into nested Python lists/floats."""
    out = {}
    for name, arr in params_tensors.items():
        out[name] = arr.tolist() if hasattr(arr, "tolist") else arr
    return out


def hp_dict(hp):
    return {
        "emb_dim": hp.emb_dim, "num_filters": hp.num_filters,
        "window": hp.window, "attn_dim": hp.attn_dim,
        "factor_dim": hp.factor_dim, "conv_activation": hp.conv_activation,
    }
