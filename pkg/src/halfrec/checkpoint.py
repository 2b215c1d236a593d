"""Portable binary checkpoints with bit-exact round-trips.

Layout (all integers little-endian):
  magic "HALF1" | version u32
  meta block:   u32 count, then (u32 key_len, key, u32 val_len, val) utf-8 pairs
  user table:   u64 count, then (u32 len, utf-8 id) in dense-index order
  item table:   same
  vocab table:  u64 count, then (u32 len, utf-8 token) in index order
  tensors:      u32 count, then records of
                (u64 name_len, name, u64 rank, u64 dims..., f64 payload)

Parameter tensors are stored under "param/<name>"; review bundles (token
indices and masks, float-encoded) under "data/<name>". Saving a loaded
checkpoint reproduces the original bytes exactly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import ReviewBundle, Vocabulary
from .model import PARAM_ORDER, HyperParams, ParamSet, param_shapes

MAGIC = b"HALF1"
VERSION = 1

_HP_INT_FIELDS = ("vocab_size", "emb_dim", "num_filters", "window",
                  "review_len", "reviews_per_entity", "factor_dim", "attn_dim")


class CheckpointError(ValueError):
    """Checkpoint file is missing, truncated, or not a checkpoint."""


@dataclass
class CheckpointData:
    meta: dict[str, str]
    user_ids: list[str]
    item_ids: list[str]
    vocab_tokens: list[str]
    params: ParamSet
    user_bundles: dict[int, ReviewBundle] | None
    item_bundles: dict[int, ReviewBundle] | None

    @property
    def model(self) -> str:
        return self.meta["model"]

    def hyperparams(self) -> HyperParams:
        kwargs = {name: int(self.meta[name]) for name in _HP_INT_FIELDS}
        kwargs["conv_activation"] = self.meta["conv_activation"]
        return HyperParams(**kwargs)

    def vocabulary(self) -> Vocabulary:
        mapping = {tok: idx for idx, tok in enumerate(self.vocab_tokens) if idx >= 2}
        return Vocabulary(mapping, int(self.meta["vocab_size"]))


def meta_from(hp: HyperParams, model: str) -> dict[str, str]:
    meta = {name: str(getattr(hp, name)) for name in _HP_INT_FIELDS}
    meta["conv_activation"] = hp.conv_activation
    meta["model"] = model
    return meta


# --- writing ---------------------------------------------------------------

def _put_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _put_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw_name = name.encode("utf-8")
    buf.write(struct.pack("<Q", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<Q", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _bundle_arrays(bundles: dict[int, ReviewBundle]):
    order = sorted(bundles)
    reviews = np.stack([bundles[k].reviews for k in order]).astype(np.float64)
    masks = np.stack([bundles[k].review_mask for k in order]).astype(np.float64)
    return reviews, masks


def save_checkpoint(path, params: ParamSet, meta: dict[str, str],
                    user_ids: list[str], item_ids: list[str],
                    vocab_tokens: list[str] | None = None,
                    user_bundles: dict[int, ReviewBundle] | None = None,
                    item_bundles: dict[int, ReviewBundle] | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))

    buf.write(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        _put_str(buf, key)
        _put_str(buf, meta[key])

    for ids in (user_ids, item_ids):
        buf.write(struct.pack("<Q", len(ids)))
        for eid in ids:
            _put_str(buf, eid)

    tokens = vocab_tokens or []
    buf.write(struct.pack("<Q", len(tokens)))
    for tok in tokens:
        _put_str(buf, tok)

    tensors: list[tuple[str, np.ndarray]] = [
        (f"param/{name}", params[name]) for name in PARAM_ORDER]
    if user_bundles is not None and item_bundles is not None:
        ur, um = _bundle_arrays(user_bundles)
        ir, im = _bundle_arrays(item_bundles)
        tensors += [("data/user_reviews", ur), ("data/user_review_mask", um),
                    ("data/item_reviews", ir), ("data/item_review_mask", im)]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _put_tensor(buf, name, arr)

    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


# --- reading ---------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self, length_u64=False) -> str:
        n = self.u64() if length_u64 else self.u32()
        return self.take(n).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string(length_u64=True)
        rank = self.u64()
        shape = tuple(self.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(self.take(count * 8), dtype="<f8")
        return name, payload.reshape(shape).astype(np.float64)


def _rebuild_bundles(reviews: np.ndarray, masks: np.ndarray,
                     ids: list[str]) -> dict[int, ReviewBundle]:
    out = {}
    for k in range(reviews.shape[0]):
        out[k] = ReviewBundle(ids[k],
                              np.rint(reviews[k]).astype(np.int64),
                              masks[k] > 0.5)
    return out


def load_checkpoint(path) -> CheckpointData:
    try:
        with open(path, "rb") as fh:
            reader = _Reader(fh.read())
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint: {err}") from err

    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    meta = {}
    for _ in range(reader.u32()):
        key = reader.string()
        meta[key] = reader.string()

    user_ids = [reader.string() for _ in range(reader.u64())]
    item_ids = [reader.string() for _ in range(reader.u64())]
    vocab_tokens = [reader.string() for _ in range(reader.u64())]

    tensors = dict(reader.tensor() for _ in range(reader.u32()))
    try:
        hp = HyperParams(**{**{k: int(meta[k]) for k in _HP_INT_FIELDS},
                            "conv_activation": meta["conv_activation"]})
        param_tensors = {name: tensors[f"param/{name}"] for name in PARAM_ORDER}
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"checkpoint is missing fields: {err}") from err

    expected = param_shapes(hp, len(user_ids), len(item_ids))
    for name, arr in param_tensors.items():
        if arr.shape != expected[name]:
            raise CheckpointError(
                f"tensor {name} has shape {arr.shape}, expected {expected[name]}")
    frozen_emb = np.zeros(param_tensors["word_emb"].shape, dtype=bool)
    frozen_emb[0, :] = True
    params = ParamSet(param_tensors, {"word_emb": frozen_emb})

    user_bundles = item_bundles = None
    if "data/user_reviews" in tensors:
        user_bundles = _rebuild_bundles(tensors["data/user_reviews"],
                                        tensors["data/user_review_mask"], user_ids)
        item_bundles = _rebuild_bundles(tensors["data/item_reviews"],
                                        tensors["data/item_review_mask"], item_ids)
    return CheckpointData(meta, user_ids, item_ids, vocab_tokens, params,
                          user_bundles, item_bundles)
