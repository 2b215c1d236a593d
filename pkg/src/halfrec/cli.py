"""Command-line entry points.

Exit codes are a stable contract: 0 success, 2 input-data error, 3
missing/invalid checkpoint, 4 unknown user or item, 1 anything else.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import ndkernel as nd
from .checkpoint import (CheckpointError, load_checkpoint, meta_from,
                         save_checkpoint)
from .config import ConfigError, read_config
from .corpus import (PAD, DataError, PreparedData, prepare, read_jsonl,
                     split_dataset, write_jsonl)
from .model import (build_lfm_node, build_rating_node, forward, init_params,
                    lfm_predict, stage_params)
from .train import DivergenceError, make_synthetic, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DATA = 2
EXIT_CHECKPOINT = 3
EXIT_UNKNOWN_ENTITY = 4


class UnknownEntityError(KeyError):
    pass


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_split(args) -> int:
    records, malformed = read_jsonl(args.input)
    total = len(records) + malformed
    if total == 0:
        raise DataError("input contains no records")
    if malformed > 0.10 * total:
        raise DataError(f"{malformed} of {total} lines are malformed (>10%)")
    ratios = tuple(float(x) for x in args.ratios.split(","))
    split = split_dataset(records, ratios, args.seed)
    split.report.malformed_lines = malformed

    os.makedirs(args.out, exist_ok=True)
    write_jsonl(split.train, os.path.join(args.out, "train.jsonl"))
    write_jsonl(split.validation, os.path.join(args.out, "val.jsonl"))
    write_jsonl(split.test, os.path.join(args.out, "test.jsonl"))
    summary = split.report.summary()
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    print(summary)
    return EXIT_OK


def _prepared_from_paths(cfg) -> PreparedData:
    if not cfg.train_path or not cfg.val_path:
        raise ConfigError("config must set train_path and val_path")
    train_records, bad_train = read_jsonl(cfg.train_path)
    val_records, bad_val = read_jsonl(cfg.val_path)
    if bad_train or bad_val:
        print(f"skipped {bad_train + bad_val} malformed lines", file=sys.stderr)
    hp = cfg.hyper
    return prepare(train_records, val_records, [], hp.vocab_size,
                   hp.review_len, hp.reviews_per_entity)


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    data = _prepared_from_paths(cfg)
    log_path = args.log or args.out + ".log"
    with open(log_path, "w", encoding="utf-8") as log:
        params, reports = train(data, cfg.hyper, cfg.training, log_stream=log)
    if data.dropped:
        print(f"dropped {data.dropped} cold-start records", file=sys.stderr)

    user_ids = sorted(data.user_index, key=data.user_index.get)
    item_ids = sorted(data.item_index, key=data.item_index.get)
    store_bundles = cfg.training.model == "half"
    save_checkpoint(
        args.out, params, meta_from(cfg.hyper, cfg.training.model),
        user_ids, item_ids, data.vocab.index_to_token(),
        data.user_bundles if store_bundles else None,
        data.item_bundles if store_bundles else None)
    best_val = min(r.val_mse for r in reports)
    print(f"{best_val:.6f}")
    return EXIT_OK


def _prepared_from_checkpoint(ckpt) -> PreparedData:
    return PreparedData(
        vocab=ckpt.vocabulary(), train=[], validation=[], test=[],
        user_index={uid: k for k, uid in enumerate(ckpt.user_ids)},
        item_index={iid: k for k, iid in enumerate(ckpt.item_ids)},
        user_bundles=ckpt.user_bundles or {}, item_bundles=ckpt.item_bundles or {})


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = _prepared_from_checkpoint(ckpt)
    hp = ckpt.hyperparams()
    records, malformed = read_jsonl(args.data)
    if malformed:
        print(f"skipped {malformed} malformed lines", file=sys.stderr)

    from .corpus import Interaction, encode_tokens, tokenize
    from .train import evaluate
    kept, dropped = [], 0
    for rec in records:
        if rec.user_id not in data.user_index or rec.item_id not in data.item_index:
            dropped += 1
            continue
        kept.append(Interaction(rec.user_id, rec.item_id, rec.rating,
                                encode_tokens(tokenize(rec.text), data.vocab,
                                              hp.review_len)))
    if dropped:
        print(f"dropped {dropped} records with unknown entities", file=sys.stderr)
    if not kept:
        raise DataError("no evaluable records")
    mse = evaluate(ckpt.params, kept, data, hp, ckpt.model)
    print(f"{mse:.6f}")
    return EXIT_OK


def _snippet(tokens: np.ndarray, vocab_tokens: list[str], width: int = 8) -> str:
    words = [vocab_tokens[t] for t in tokens if t != PAD][:width]
    return " ".join(words) if words else "(empty)"


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = _prepared_from_checkpoint(ckpt)
    if args.user not in data.user_index:
        raise UnknownEntityError(f"unknown user {args.user!r}")
    if args.item not in data.item_index:
        raise UnknownEntityError(f"unknown item {args.item!r}")
    u, i = data.user_index[args.user], data.item_index[args.item]

    if ckpt.model == "lfm":
        print(f"{lfm_predict(u, i, ckpt.params):.6f}")
        if args.explain:
            print("model has no review pathway; nothing to explain")
        return EXIT_OK

    hp = ckpt.hyperparams()
    pred = forward(u, i, data.user_bundles[u], data.item_bundles[i],
                   ckpt.params, hp)
    print(f"{pred.rating:.6f}")
    if args.explain:
        for label, beta, bundle in (
                ("user", pred.review_attn_user, data.user_bundles[u]),
                ("item", pred.review_attn_item, data.item_bundles[i])):
            print(f"{label} reviews by attention weight:")
            order = np.argsort(-beta)
            for j in order:
                if bundle.review_mask[j] and beta[j] > 0:
                    print(f"  {beta[j]:.4f}  {_snippet(bundle.reviews[j], ckpt.vocab_tokens)}")
    return EXIT_OK


def _gradcheck_forward(data: PreparedData, hp, model: str, pairs):
    """Closure factory for the finite-difference checker."""
    from .model import ParamSet
    from .train import _mse_node

    def fwd(values, with_grads):
        tape = nd.Tape()
        leaves = {name: tape.leaf(arr, requires_grad=with_grads)
                  for name, arr in values.items()}
        nodes = []
        for u, i, _ in pairs:
            if model == "half":
                node, _ = build_rating_node(tape, leaves, hp, u, i,
                                            data.user_bundles[u],
                                            data.item_bundles[i])
            else:
                node = build_lfm_node(tape, leaves, u, i)
            nodes.append(node)
        targets = np.array([r for _, _, r in pairs])
        loss = _mse_node(tape, nodes, targets)
        grads = None
        if with_grads:
            out = nd.backward(tape, loss)
            grads = {name: out.of(leaves[name]) for name in values}
        return float(loss.value), grads, tape.relu_margin

    return fwd


def cmd_gradcheck(args) -> int:
    cfg = read_config(args.config)
    hp = cfg.hyper
    synth = make_synthetic(seed=args.seed, users=4, items=4,
                           vocab_words=max(hp.vocab_size - 2, 10),
                           noise_sd=0.3, interactions_per_user=3)
    data = prepare(synth.records, [], [], hp.vocab_size, hp.review_len,
                   hp.reviews_per_entity)
    mean = float(np.mean([x.rating for x in data.train]))
    params = init_params(hp, args.seed, mean,
                         len(data.user_index), len(data.item_index))
    pairs = [(data.user_index[x.user_id], data.item_index[x.item_id], x.rating)
             for x in data.train[:3]]
    fwd = _gradcheck_forward(data, hp, cfg.training.model, pairs)
    report = nd.grad_check(fwd, params.tensors, h=1e-5, tol=args.tol,
                           seed=args.seed, corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    if report.passed(args.tol):
        print("gradient check passed")
        return EXIT_OK
    print(f"gradient check FAILED for: {', '.join(report.failures(args.tol))}")
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halfrec",
        description="review-based rating prediction with hierarchical attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a JSON-Lines dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one user-item rating")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--explain", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", default=None,
                   help="debug: corrupt this tensor's analytic gradient")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as err:
        return _fail(str(err), EXIT_DATA)
    except CheckpointError as err:
        return _fail(str(err), EXIT_CHECKPOINT)
    except UnknownEntityError as err:
        return _fail(str(err.args[0]), EXIT_UNKNOWN_ENTITY)
    except (ConfigError, DivergenceError, OSError, ValueError, KeyError) as err:
        return _fail(str(err), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
