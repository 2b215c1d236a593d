"""Dataset ingestion: tokenization, vocabulary, splitting, review bundles.

Input datasets are JSON Lines with string "user_id", "item_id", "text" and
numeric "rating" per line. The pipeline is deterministic end to end: the
same bytes and config always produce identical vocabularies, splits and
bundles.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# maximal runs of Unicode alphanumerics (word chars minus underscore)
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DataError(ValueError):
    """Input data is malformed beyond tolerance or structurally unusable."""


@dataclass
class RawRecord:
    """One parsed dataset line, before tokenization."""

    user_id: str
    item_id: str
    rating: float
    text: str


@dataclass
class Interaction:
    """One (user, item, rating, encoded review) training record."""

    user_id: str
    item_id: str
    rating: float
    tokens: np.ndarray  # int64, length exactly T


@dataclass
class Vocabulary:
    """Token-to-index map with reserved PAD=0 and UNK=1 slots."""

    token_to_index: dict[str, int]
    size: int

    def lookup(self, token: str) -> int:
        return self.token_to_index.get(token, UNK)

    def index_to_token(self) -> list[str]:
        words = [PAD_TOKEN, UNK_TOKEN] + [""] * (len(self.token_to_index))
        for tok, idx in self.token_to_index.items():
            words[idx] = tok
        return words


@dataclass
class ReviewBundle:
    """Fixed-shape stack of one entity's training reviews."""

    owner_id: str
    reviews: np.ndarray  # int64, N x T
    review_mask: np.ndarray  # bool, N
    source_pairs: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class SplitReport:
    train: int = 0
    validation: int = 0
    test: int = 0
    dropped_cold_start: int = 0
    malformed_lines: int = 0
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"train: {self.train}",
            f"validation: {self.validation}",
            f"test: {self.test}",
            f"dropped cold-start: {self.dropped_cold_start}",
            f"malformed lines: {self.malformed_lines}",
        ]
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


@dataclass
class DatasetSplit:
    """Train/validation/test partition with dense entity indices from train."""

    train: list
    validation: list
    test: list
    user_index: dict[str, int]
    item_index: dict[str, int]
    report: SplitReport


def tokenize(text: str) -> list[str]:
    """Lowercase and split on maximal runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def build_vocab(train_records, size: int) -> Vocabulary:
    """Index the `size - 2` most frequent train tokens; ties break lexicographically."""
    if size < 3:
        raise DataError(f"vocabulary size must be at least 3, got {size}")
    counts = Counter()
    for rec in train_records:
        counts.update(tokenize(rec.text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    mapping = {tok: i + 2 for i, (tok, _) in enumerate(ranked[:size - 2])}
    return Vocabulary(token_to_index=mapping, size=size)


def encode_tokens(tokens, vocab: Vocabulary, length: int) -> np.ndarray:
    """Map tokens to indices, truncating at the tail or right-padding with PAD."""
    if length < 1:
        raise DataError(f"review length must be positive, got {length}")
    idx = [vocab.lookup(t) for t in tokens[:length]]
    idx.extend([PAD] * (length - len(idx)))
    return np.array(idx, dtype=np.int64)


def _assign_fraction(user_id: str, item_id: str, seed: int) -> float:
    """Deterministic per-record fraction in [0, 1) from a keyed hash."""
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(
        user_id.encode("utf-8") + b"\x00" + item_id.encode("utf-8"),
        key=key, digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def split_dataset(records: list[RawRecord], ratios, seed: int) -> DatasetSplit:
    """Partition records by a seeded hash of (user_id, item_id).

    Validation/test records whose user or item never occurs in train are
    dropped and counted. Re-running with the same seed reproduces the split
    exactly.
    """
    if not records:
        raise DataError("cannot split an empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")

    train, val, test = [], [], []
    for rec in records:
        frac = _assign_fraction(rec.user_id, rec.item_id, seed)
        if frac < ratios[0]:
            train.append(rec)
        elif frac < ratios[0] + ratios[1]:
            val.append(rec)
        else:
            test.append(rec)

    train_users = {r.user_id for r in train}
    train_items = {r.item_id for r in train}
    report = SplitReport()
    kept_val = [r for r in val if r.user_id in train_users and r.item_id in train_items]
    kept_test = [r for r in test if r.user_id in train_users and r.item_id in train_items]
    report.dropped_cold_start = (len(val) - len(kept_val)) + (len(test) - len(kept_test))
    report.train, report.validation, report.test = len(train), len(kept_val), len(kept_test)
    for name, part in (("train", train), ("validation", kept_val), ("test", kept_test)):
        if not part:
            report.warnings.append(f"{name} split is empty")

    user_index, item_index = {}, {}
    for rec in train:
        user_index.setdefault(rec.user_id, len(user_index))
        item_index.setdefault(rec.item_id, len(item_index))
    return DatasetSplit(train, kept_val, kept_test, user_index, item_index, report)


def encode_split(split: DatasetSplit, vocab: Vocabulary, length: int) -> DatasetSplit:
    """Replace raw records with encoded Interactions, keeping indices and report."""

    def enc(recs):
        return [
            Interaction(r.user_id, r.item_id, float(r.rating),
                        encode_tokens(tokenize(r.text), vocab, length))
            for r in recs
        ]

    return DatasetSplit(enc(split.train), enc(split.validation), enc(split.test),
                        split.user_index, split.item_index, split.report)


def build_bundles(split: DatasetSplit, n_reviews: int, length: int):
    """Stack each entity's train reviews (data order) into N x T bundles.

    Returns (user_bundles, item_bundles), each a dict keyed by dense index.
    Entities with more than N train reviews keep the first N; fewer are
    padded with all-PAD rows and a false mask.
    """
    if n_reviews < 1:
        raise DataError(f"reviews per entity must be positive, got {n_reviews}")

    def collect(index: dict[str, int], key) -> dict[int, ReviewBundle]:
        rows: dict[str, list] = {eid: [] for eid in index}
        for inter in split.train:
            rows[key(inter)].append(inter)
        bundles = {}
        for eid, dense in index.items():
            chosen = rows[eid][:n_reviews]
            reviews = np.zeros((n_reviews, length), dtype=np.int64)
            mask = np.zeros(n_reviews, dtype=bool)
            pairs = []
            for j, inter in enumerate(chosen):
                reviews[j] = inter.tokens
                mask[j] = True
                pairs.append((inter.user_id, inter.item_id))
            bundles[dense] = ReviewBundle(eid, reviews, mask, pairs)
        return bundles

    users = collect(split.user_index, lambda i: i.user_id)
    items = collect(split.item_index, lambda i: i.item_id)
    return users, items


def parse_jsonl(lines) -> tuple[list[RawRecord], int]:
    """Parse JSON-Lines records, counting (and skipping) malformed lines."""
    records, malformed = [], 0
    for line in lines:
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            user, item = obj["user_id"], obj["item_id"]
            rating, text = obj["rating"], obj["text"]
            if not (isinstance(user, str) and isinstance(item, str)
                    and isinstance(text, str) and isinstance(rating, (int, float))
                    and np.isfinite(float(rating))):
                raise ValueError("bad field types")
            records.append(RawRecord(user, item, float(rating), text))
        except (ValueError, KeyError, TypeError):
            malformed += 1
    return records, malformed


def read_jsonl(path) -> tuple[list[RawRecord], int]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_jsonl(fh)


def write_jsonl(records: list[RawRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(
                {"user_id": r.user_id, "item_id": r.item_id,
                 "rating": r.rating, "text": r.text},
                sort_keys=True, ensure_ascii=False) + "\n")


@dataclass
class PreparedData:
    """Everything the trainer needs, derived from already-split raw records."""

    vocab: Vocabulary
    train: list[Interaction]
    validation: list[Interaction]
    test: list[Interaction]
    user_index: dict[str, int]
    item_index: dict[str, int]
    user_bundles: dict[int, ReviewBundle]
    item_bundles: dict[int, ReviewBundle]
    dropped: int = 0


def prepare(train_records, val_records, test_records, vocab_size: int,
            length: int, n_reviews: int) -> PreparedData:
    """Run vocabulary, encoding, indexing and bundling over pre-split records.

    Entities of validation/test records never seen in train are dropped and
    counted, mirroring the split-time cold-start rule.
    """
    if not train_records:
        raise DataError("train split is empty")
    vocab = build_vocab(train_records, vocab_size)

    user_index, item_index = {}, {}
    for rec in train_records:
        user_index.setdefault(rec.user_id, len(user_index))
        item_index.setdefault(rec.item_id, len(item_index))

    dropped = 0

    def enc(recs, filter_unknown):
        nonlocal dropped
        out = []
        for r in recs:
            if filter_unknown and (r.user_id not in user_index or r.item_id not in item_index):
                dropped += 1
                continue
            out.append(Interaction(r.user_id, r.item_id, float(r.rating),
                                   encode_tokens(tokenize(r.text), vocab, length)))
        return out

    split = DatasetSplit(
        enc(train_records, False), enc(val_records, True), enc(test_records, True),
        user_index, item_index, SplitReport(),
    )
    user_bundles, item_bundles = build_bundles(split, n_reviews, length)
    return PreparedData(vocab, split.train, split.validation, split.test,
                        user_index, item_index, user_bundles, item_bundles, dropped)
