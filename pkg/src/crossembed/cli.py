"""Command-line entry point: ``crossembed <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric abort (non-finite loss).

A JSON ``--config`` file may hold the sections ``data``, ``vocab``, ``model``,
``train`` and ``eval``; explicit flags override it. Every command prints its
resolved configuration to stderr before doing any work.
"""

from __future__ import annotations

import argparse
import contextlib
import difflib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from crossembed.autodiff.checkpoint import load_checkpoint, save_checkpoint
from crossembed.data import (SyntheticSpec, encode_split, generate_synthetic, load_dataset,
                             read_manifest, write_jsonl, write_manifest)
from crossembed.encoders import DualEncoder, ModelConfig
from crossembed.errors import CrossEmbedError, DataError, NumericError
from crossembed.retrieval import (DEFAULT_KS, DEFAULT_MEMORY_BUDGET, benchmark_scan, evaluate_pairs, format_table,
                                  read_embeddings, reports_to_json, write_embeddings)
from crossembed.text import Vocabulary, encode, preprocess, segment, train_vocab
from crossembed.trainer import TrainConfig, train

log = logging.getLogger("crossembed")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting, and never expands abbreviated flags (typos get a suggestion)."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--ks values must be >= 1")
    return ks


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="JSONL pairs file")
    p.add_argument("--manifest", type=Path, help="split manifest JSON (default: hash split)")
    p.add_argument("--proportions", type=str, default="0.9,0.01,0.09",
                   help="train,val,test proportions for hash splitting")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--text-encoder", choices=("avg", "rnn", "transformer"))
    p.add_argument("--layers", type=int, help="transformer blocks")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--max-len", type=int)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="crossembed", description="Dual-encoder image/title retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output JSONL path")
    p.add_argument("--manifest-out", type=Path, help="split manifest path (default <out>.splits.json)")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--feature-noise", type=float)
    p.add_argument("--order-coding", action="store_true", default=None)
    p.add_argument("--order-group-size", type=int)

    p = subs["train-vocab"] = sub.add_parser("train-vocab", help="train a subword vocabulary")
    _common(p)
    _data_args(p)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out", type=Path, required=True, help="vocabulary TSV path")

    p = subs["tokenize"] = sub.add_parser("tokenize", help="show segmentation of titles")
    _common(p)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("titles", nargs="*", help="titles (default: one per stdin line)")

    p = subs["train"] = sub.add_parser("train", help="two-stage training")
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="best checkpoint path")
    p.add_argument("--log", type=Path, help="JSONL training log (default <out>.log.jsonl)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--ks", type=_ks, help="validation K values")

    p = subs["embed"] = sub.add_parser("embed", help="export image and text embeddings")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True,
                   help="prefix; writes <out>.img.vec and <out>.txt.vec (+ .ids)")

    p = subs["evaluate"] = sub.add_parser("evaluate", help="R@K in both directions")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--proportions", type=str, default="0.9,0.01,0.09")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--vocab", type=Path)
    p.add_argument("--embeddings", type=Path, help="prefix written by 'embed' (instead of a checkpoint)")
    p.add_argument("--split", default="test")
    p.add_argument("--ks", type=_ks)
    p.add_argument("--relevance", choices=("exact", "group"))
    p.add_argument("--memory-budget", type=int, help="bytes per score tile")
    p.add_argument("--name", help="row label in the table")
    p.add_argument("--out", type=Path, help="JSON report path")

    p = subs["bench"] = sub.add_parser("bench", help="time a brute-force index scan")
    _common(p)
    p.add_argument("--index-size", type=int, default=200_000)
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--memory-budget", type=int, default=DEFAULT_MEMORY_BUDGET)
    return parser, subs


# ---------------------------------------------------------------------------
# helpers


def _load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON config ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return cfg


def _set(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


def _dump(effective: dict) -> None:
    print("effective config: " + json.dumps(effective, sort_keys=True, default=str), file=sys.stderr)


def _proportions(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--proportions expects comma-separated numbers, got {text!r}") from None
    if not 1 <= len(vals) <= 3 or min(vals) < 0 or sum(vals) <= 0:
        raise UsageError(f"--proportions needs 1-3 non-negative values, got {text!r}")
    return vals


def _dataset(args):
    manifest = read_manifest(args.manifest) if args.manifest else None
    if manifest is None:
        sidecar = Path(str(args.data) + ".splits.json")
        if sidecar.exists():
            manifest = read_manifest(sidecar)
    return load_dataset(args.data, manifest, _proportions(args.proportions))


def _split(ds, name: str):
    ex = ds.split(name)
    if not ex:
        raise DataError(f"split {name!r} is empty")
    return ex


def _load_model(path: Path) -> tuple[DualEncoder, dict]:
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise DataError(f"{path}: checkpoint lacks a model config")
    model = DualEncoder(ModelConfig.from_dict(meta["model"]), seed=0)
    model.load_state_dict(params)
    return model, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: dict, seed: int) -> int:
    spec_d = dict(cfg.get("data", {}))
    spec_d["seed"] = seed
    for flag in ("num_classes", "samples", "feature_dim", "feature_noise", "order_coding",
                 "order_group_size"):
        _set(spec_d, flag, getattr(args, flag))
    spec = SyntheticSpec(**spec_d)
    _dump({"command": "gen-data", "data": asdict(spec), "out": str(args.out)})
    ds = generate_synthetic(spec)
    write_jsonl(args.out, ds.examples)
    manifest_path = args.manifest_out or Path(str(args.out) + ".splits.json")
    write_manifest(manifest_path, ds)
    print(f"wrote {len(ds.examples)} pairs to {args.out} (splits: {manifest_path})")
    return EXIT_OK


def cmd_train_vocab(args, cfg: dict, seed: int) -> int:
    vcfg = {"target_size": 4000, **cfg.get("vocab", {})}
    _set(vcfg, "target_size", args.vocab_size)
    _dump({"command": "train-vocab", "vocab": vcfg, "data": str(args.data), "out": str(args.out)})
    ds = _dataset(args)
    corpus = [preprocess(ex.title) for ex in _split(ds, "train")]
    vocab = train_vocab(corpus, **vcfg)
    vocab.save(args.out)
    print(f"wrote vocabulary of {vocab.size} ids to {args.out}")
    return EXIT_OK


def cmd_tokenize(args, cfg: dict, seed: int) -> int:
    _dump({"command": "tokenize", "vocab": str(args.vocab), "max_len": args.max_len})
    vocab = Vocabulary.load(args.vocab)
    titles = args.titles or [line.rstrip("\n") for line in sys.stdin]
    for title in titles:
        clean = preprocess(title)
        seq = encode(title, vocab, args.max_len)
        pieces = segment(clean, vocab)[: args.max_len]
        print(json.dumps({"title": title, "normalized": clean, "pieces": pieces,
                          "ids": seq.ids[: seq.length].tolist()}))
    return EXIT_OK


def _resolve_model(args, cfg: dict, vocab_size: int, feat_dim: int) -> ModelConfig:
    m = dict(cfg.get("model", {}))
    m["vocab_size"], m["image_feat_dim"] = vocab_size, feat_dim
    _set(m, "text_encoder", args.text_encoder)
    _set(m, "embed_dim", args.embed_dim)
    _set(m, "max_len", args.max_len)
    if args.layers is not None:
        m["transformer"] = {**m.get("transformer", {}), "layers": args.layers}
    return ModelConfig.from_dict(m)


def _resolve_train(args, cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    t["seed"] = seed
    _set(t, "batch_size", args.batch_size)
    _set(t, "margin", args.margin)
    _set(t, "eval_ks", args.ks)
    base = TrainConfig.from_dict(t)
    if args.stage1_epochs is not None:
        base.stage1.epochs = args.stage1_epochs
    if args.stage2_epochs is not None:
        base.stage2.epochs = args.stage2_epochs
    return TrainConfig.from_dict(base.to_dict())


def cmd_train(args, cfg: dict, seed: int) -> int:
    vocab = Vocabulary.load(args.vocab)
    ds = _dataset(args)
    mcfg = _resolve_model(args, cfg, vocab.size, ds.feature_dim)
    tcfg = _resolve_train(args, cfg, seed)
    log_path = args.log or Path(str(args.out) + ".log.jsonl")
    _dump({"command": "train", "model": mcfg.to_dict(), "train": tcfg.to_dict(),
           "data": str(args.data), "vocab": str(args.vocab), "out": str(args.out),
           "log": str(log_path), "resume": str(args.resume) if args.resume else None})
    tr = encode_split(_split(ds, "train"), vocab, mcfg.max_len)
    va = encode_split(_split(ds, "val"), vocab, mcfg.max_len)
    model = DualEncoder(mcfg, seed=seed)
    start = 0
    if args.resume:
        params, meta = load_checkpoint(args.resume)
        if meta.get("model") != mcfg.to_dict():
            raise DataError(f"{args.resume}: model config differs from the requested one")
        model.load_state_dict(params)
        start = int(meta.get("completed_epochs", 0))

    def save_latest(entry, m):
        save_checkpoint(Path(str(args.out) + ".last"), m.state_dict(),
                        {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                         "completed_epochs": entry.epoch + 1})

    result = train(model, tr, va, tcfg, log_path=log_path, start_epoch=start, on_epoch=save_latest)
    total = tcfg.stage1.epochs + tcfg.stage2.epochs
    save_checkpoint(args.out, result.best_state,
                    {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "best_epoch": result.best_epoch,
                     "completed_epochs": total, "validation": result.best_metrics})
    print(f"best epoch {result.best_epoch}: {json.dumps(result.best_metrics, sort_keys=True)}")
    print(f"wrote checkpoint {args.out}")
    return EXIT_OK


def cmd_embed(args, cfg: dict, seed: int) -> int:
    _dump({"command": "embed", "checkpoint": str(args.checkpoint), "data": str(args.data),
           "split": args.split, "out": str(args.out)})
    model, _ = _load_model(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    enc = encode_split(_split(_dataset(args), args.split), vocab, model.config.max_len)
    write_embeddings(Path(str(args.out) + ".img.vec"), model.image_embeddings(enc.features), enc.ids)
    write_embeddings(Path(str(args.out) + ".txt.vec"),
                     model.text_embeddings(enc.tokens, enc.lengths), enc.ids)
    if enc.groups is not None:
        groups = [ex.group_id or "" for ex in _split(_dataset(args), args.split)]
        Path(str(args.out) + ".groups").write_text("\n".join(groups) + "\n")
    print(f"wrote {len(enc)} image and text embeddings to {args.out}.{{img,txt}}.vec")
    return EXIT_OK


def cmd_evaluate(args, cfg: dict, seed: int) -> int:
    ecfg = {"ks": list(DEFAULT_KS), "relevance": "exact", "memory_budget": DEFAULT_MEMORY_BUDGET,
            **cfg.get("eval", {})}
    _set(ecfg, "ks", args.ks)
    _set(ecfg, "relevance", args.relevance)
    if args.memory_budget is not None:
        ecfg["memory_budget"] = args.memory_budget
    _dump({"command": "evaluate", "eval": ecfg, "checkpoint": str(args.checkpoint),
           "embeddings": str(args.embeddings), "split": args.split})
    groups = None
    if args.embeddings:
        img, img_ids = read_embeddings(Path(str(args.embeddings) + ".img.vec"))
        txt, txt_ids = read_embeddings(Path(str(args.embeddings) + ".txt.vec"))
        if img_ids != txt_ids:
            raise DataError("image and text embedding files list different ids")
        gpath = Path(str(args.embeddings) + ".groups")
        if ecfg["relevance"] == "group":
            if not gpath.exists():
                raise DataError(f"{gpath}: group labels needed for --relevance group")
            groups = gpath.read_text().split("\n")[: len(img_ids)]
        name = args.name or args.embeddings.name
    else:
        if not (args.checkpoint and args.vocab and args.data):
            raise UsageError("evaluate needs --embeddings, or --checkpoint with --vocab and --data")
        model, _ = _load_model(args.checkpoint)
        vocab = Vocabulary.load(args.vocab)
        enc = encode_split(_split(_dataset(args), args.split), vocab, model.config.max_len)
        img = model.image_embeddings(enc.features)
        txt = model.text_embeddings(enc.tokens, enc.lengths)
        if ecfg["relevance"] == "group":
            if enc.groups is None:
                raise DataError("--relevance group needs 'group' fields in the data")
            groups = enc.groups
        name = args.name or model.config.text_encoder
    reports = {name: evaluate_pairs(img, txt, ecfg["ks"], groups, ecfg["memory_budget"])}
    for rep in reports[name].values():
        rep.ranks = None
    print(format_table(reports, ecfg["ks"]))
    if args.out:
        args.out.write_text(reports_to_json(reports))
    return EXIT_OK


def cmd_bench(args, cfg: dict, seed: int) -> int:
    eff = {"index_size": args.index_size, "dim": args.embed_dim, "queries": args.queries,
           "k": args.k, "memory_budget": args.memory_budget, "seed": seed, "threads": args.threads}
    _dump({"command": "bench", **eff})
    result = benchmark_scan(args.index_size, args.embed_dim, args.queries, args.k,
                            memory_budget=args.memory_budget, seed=seed)
    print(json.dumps({**result, "memory_budget": args.memory_budget, "threads": args.threads},
                     sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train-vocab": cmd_train_vocab, "tokenize": cmd_tokenize,
    "train": cmd_train, "embed": cmd_embed, "evaluate": cmd_evaluate, "bench": cmd_bench,
}


def _suggest(flag: str, parser: argparse.ArgumentParser) -> str:
    options = [s for a in parser._actions for s in a.option_strings if s.startswith("--")]
    close = difflib.get_close_matches(flag.split("=")[0], options, n=1)
    return f" (did you mean {close[0]}?)" if close else ""


@contextlib.contextmanager
def _thread_limit(n: int):
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\ncrossembed: a subcommand is required")
        if extra:
            flag = extra[0]
            raise UsageError(f"crossembed {args.command}: unrecognized argument {flag}"
                             + _suggest(flag, subs[args.command]))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, cfg, seed)
    except UsageError as exc:
        print(f"crossembed {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"crossembed {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CrossEmbedError, ValueError, OSError) as exc:
        print(f"crossembed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
