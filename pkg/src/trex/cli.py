"""Command-line entry point: gen-data, train, evaluate, predict.

Every run is reproducible from the effective-config JSON echoed into the
output directory: configuration merges defaults < config file < flags,
and all randomness flows from the single --seed value.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint
from .data import (
    DataError,
    Dataset,
    UnknownCategoryError,
    filter_eligible,
    holdout_split,
    load_dataset,
    load_vocab,
    save_dataset,
    save_vocab,
)
from .evalkit import (
    DEFAULT_RANK_DEPTH,
    EvalError,
    EvalReport,
    evaluate,
    generate_basket,
    model_system,
    ptop_system,
)
from .model import ConfigError, ModelConfig, PositionalStrategy
from .report import export_all
from .synthetic import (
    ARCHETYPES,
    InvalidConfigError,
    SyntheticConfig,
    archetype_counts,
    generate_synthetic,
)
from .trainer import TrainConfig, TrainerError, train


class UsageError(Exception):
    """Bad flags, bad config values, or missing input files."""


GEN_DATA_DEFAULTS = {
    "customers": 200,
    "categories": 35,
    "sessions_min": 4,
    "sessions_max": 12,
    "gap_min": 1,
    "gap_max": 14,
    "archetype": "frequency:0.4,alternating:0.2,periodic:0.2,complementary:0.2",
    "liked_categories": 3,
    "liked_prob": 0.85,
    "base_prob": 0.02,
    "bundle_size": 3,
    "period": 3,
    "pair_count": 2,
    "pair_prob": 0.9,
    "seed": 0,
}

MODEL_DEFAULTS = {
    "embed_dim": 32,
    "num_heads": 2,
    "encoder_layers": 2,
    "decoder_layers": 2,
    "ffn_dim": 64,
    "dropout": 0.1,
    "positional": "relative_days",
    "clip_days": 365,
    "n_enc": 24,
    "n_dec": 6,
}

TRAIN_DEFAULTS = {
    **MODEL_DEFAULTS,
    "learning_rate": 1e-4,
    "weight_decay": 0.01,
    "clip_norm": 0.5,
    "batch_size": 32,
    "max_epochs": 50,
    "patience": 5,
    "samples_per_customer": 4,
    "shuffle_within_session": False,
    "min_sessions": 3,
    "val_frac": 0.1,
    "seed": 0,
}

EVALUATE_DEFAULTS = {
    "system": "trex",
    "compare": False,
    "ks": "2,3,4,5,6,7,8,9,10,11,12,13,14",
    "rank_depth": DEFAULT_RANK_DEPTH,
    "mode": "one_shot",
    "min_sessions": 3,
    "val_frac": 0.1,
    "figures": True,
    "seed": 0,
}

PREDICT_DEFAULTS = {
    "k": 5,
    "mode": "one_shot",
    "partial": "",
}


def _merge_config(defaults: dict, config_path: str | None, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _parse_archetype_mix(spec: str) -> dict[str, float]:
    mix = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, weight = part.partition(":")
        if name not in ARCHETYPES:
            raise UsageError(f"unknown archetype {name!r} (choose from {ARCHETYPES})")
        try:
            mix[name] = float(weight) if weight else 1.0
        except ValueError:
            raise UsageError(f"bad archetype weight in {part!r}")
    if not mix:
        raise UsageError(f"empty archetype mix {spec!r}")
    return mix


def _parse_ks(spec: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in str(spec).split(",") if str(x).strip())
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {spec!r}")
    if not ks or min(ks) < 1:
        raise UsageError(f"--ks values must be >= 1, got {spec!r}")
    return ks


def _load_split(cfg: dict, data_path: str, vocab_path: str):
    vocab = load_vocab(_require_file(vocab_path, "vocab file"))
    ds = load_dataset(_require_file(data_path, "dataset file"), vocab)
    eligible = filter_eligible(ds, cfg["min_sessions"])
    if not eligible.customers:
        raise UsageError(
            f"no customers with at least {cfg['min_sessions']} sessions in {data_path}"
        )
    return holdout_split(eligible, cfg["val_frac"], cfg["seed"])


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _merge_config(GEN_DATA_DEFAULTS, args.config, args)
    out_dir = Path(args.out)
    mix = (
        cfg["archetype"]
        if isinstance(cfg["archetype"], dict)
        else _parse_archetype_mix(cfg["archetype"])
    )
    syn = SyntheticConfig(
        num_customers=cfg["customers"],
        num_categories=cfg["categories"],
        sessions_min=cfg["sessions_min"],
        sessions_max=cfg["sessions_max"],
        gap_min_days=cfg["gap_min"],
        gap_max_days=cfg["gap_max"],
        archetype_mix=mix,
        liked_categories=cfg["liked_categories"],
        liked_prob=cfg["liked_prob"],
        base_prob=cfg["base_prob"],
        bundle_size=cfg["bundle_size"],
        period=cfg["period"],
        pair_count=cfg["pair_count"],
        pair_prob=cfg["pair_prob"],
    )
    syn.validate()
    ds = generate_synthetic(syn, seed=cfg["seed"])
    _echo_config(cfg, out_dir)
    save_dataset(ds, out_dir / "dataset.jsonl")
    save_vocab(ds.vocab, out_dir / "vocab.json")
    counts = ", ".join(f"{k}={v}" for k, v in sorted(archetype_counts(ds).items()))
    print(f"wrote {out_dir / 'dataset.jsonl'} and {out_dir / 'vocab.json'}")
    print(
        f"customers={len(ds.customers)} sessions={ds.num_sessions} "
        f"categories={ds.vocab.num_real} [{counts}]"
    )
    return 0


def _model_config_from(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        embed_dim=cfg["embed_dim"],
        num_heads=cfg["num_heads"],
        num_encoder_layers=cfg["encoder_layers"],
        num_decoder_layers=cfg["decoder_layers"],
        ffn_dim=cfg["ffn_dim"],
        dropout_rate=cfg["dropout"],
        positional_strategy=cfg["positional"],
        clip_days=cfg["clip_days"],
        n_enc=cfg["n_enc"],
        n_dec=cfg["n_dec"],
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _merge_config(TRAIN_DEFAULTS, args.config, args)
    out_dir = Path(args.out)
    split = _load_split(cfg, args.data, args.vocab)
    model_cfg = _model_config_from(cfg, split.train.vocab.size)
    train_cfg = TrainConfig(
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        clip_norm=cfg["clip_norm"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        seed=cfg["seed"],
        samples_per_customer=cfg["samples_per_customer"],
        shuffle_within_session=bool(cfg["shuffle_within_session"]),
    )
    try:
        model_cfg.validate()
        train_cfg.validate()
    except (ConfigError, ValueError) as e:
        raise UsageError(str(e))
    _echo_config(cfg, out_dir)
    ckpt = train(
        model_cfg,
        train_cfg,
        split,
        checkpoint_path=out_dir / "checkpoint.trex",
        runlog_path=out_dir / "runlog.jsonl",
    )
    meta = ckpt.metadata
    final = meta.get("final_train_loss")
    final_text = f"{final:.4f}" if final is not None else "n/a (0 epochs)"
    print(f"trained {meta['trained_epochs']} epoch(s); final train loss {final_text}")
    print(
        f"best validation loss {meta['best_val_loss']:.4f} at epoch {meta['epoch']}; "
        f"checkpoint: {out_dir / 'checkpoint.trex'}"
    )
    return 0


def _print_report_table(reports: list[EvalReport]) -> None:
    header = f"{'system':<10} {'k':>3} {'recall':>8} {'precision':>10}"
    print(header)
    for report in reports:
        for m in report.per_k:
            print(
                f"{report.system:<10} {m.k:>3} {m.recall_mean:>8.4f} {m.precision_mean:>10.4f}"
            )
    for report in reports:
        print(
            f"{report.system}: rank-match exact {report.exact_match_fraction:.2%}, "
            f"within one rank {report.within_one_fraction:.2%}, "
            f"misses {report.rank_misses}"
        )


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _merge_config(EVALUATE_DEFAULTS, args.config, args)
    out_dir = Path(args.out)
    ks = _parse_ks(cfg["ks"])
    if cfg["mode"] not in ("one_shot", "autoregressive"):
        raise UsageError(f"--mode must be one_shot or autoregressive, got {cfg['mode']!r}")
    split = _load_split(cfg, args.data, args.vocab)

    systems: list[tuple[str, object]] = []
    wants_model = cfg["compare"] or cfg["system"] == "trex"
    if wants_model:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --system ptop is used alone")
        ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
        if ckpt.vocab != split.train.vocab:
            raise TrainerError(
                "checkpoint vocabulary does not match the dataset vocabulary"
            )
        systems.append(("trex", model_system(ckpt, mode=cfg["mode"])))
    if cfg["compare"] or cfg["system"] == "ptop":
        systems.append(("ptop", ptop_system()))

    _echo_config(cfg, out_dir)
    reports = [
        evaluate(predict, split, system=name, ks=ks, rank_depth=cfg["rank_depth"])
        for name, predict in systems
    ]
    written = export_all(reports, out_dir, figures=bool(cfg["figures"]))
    _print_report_table(reports)
    if len(reports) == 2:
        a, b = reports
        print(f"deltas ({a.system} - {b.system}) over {a.num_customers} customers:")
        for ma, mb in zip(a.per_k, b.per_k):
            print(
                f"  k={ma.k:>2} recall {ma.recall_mean - mb.recall_mean:+.4f} "
                f"precision {ma.precision_mean - mb.precision_mean:+.4f}"
            )
    print(f"wrote {len(written)} file(s) to {out_dir}")
    return 0


def _load_single_history(args: argparse.Namespace, ckpt: Checkpoint):
    if bool(args.history) == bool(args.history_json):
        raise UsageError("provide exactly one of --history or --history-json")
    if args.history:
        ds = load_dataset(_require_file(args.history, "history file"), ckpt.vocab)
    else:
        import tempfile

        try:
            obj = json.loads(args.history_json)
        except json.JSONDecodeError as e:
            raise UsageError(f"--history-json is not valid JSON: {e}")
        with tempfile.NamedTemporaryFile("w", suffix=".jsonl", delete=False) as fh:
            fh.write(json.dumps(obj) + "\n")
            tmp = fh.name
        ds = load_dataset(tmp, ckpt.vocab)
        Path(tmp).unlink()
    if len(ds.customers) != 1:
        raise UsageError(f"expected exactly one customer history, got {len(ds.customers)}")
    return ds.customers[0]


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _merge_config(PREDICT_DEFAULTS, args.config, args)
    if cfg["k"] < 1:
        raise UsageError(f"--k must be >= 1, got {cfg['k']}")
    if cfg["mode"] not in ("one_shot", "autoregressive"):
        raise UsageError(f"--mode must be one_shot or autoregressive, got {cfg['mode']!r}")
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    history = _load_single_history(args, ckpt)
    partial_names = [p.strip() for p in str(cfg["partial"]).split(",") if p.strip()]
    try:
        prefix = tuple(ckpt.vocab.id_of(name) for name in partial_names)
    except UnknownCategoryError as e:
        raise UsageError(str(e))
    mode = "autoregressive" if prefix else cfg["mode"]
    ranked = generate_basket(ckpt, history, cfg["k"], mode=mode, prefix=prefix)
    for cat, score in ranked.items:
        print(f"{ckpt.vocab.name_of(cat)}\t{score:.6f}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (snake_case keys matching flags)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trex",
        description="Next-basket category recommendation: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--customers", type=int)
    g.add_argument("--categories", type=int)
    g.add_argument("--sessions-min", dest="sessions_min", type=int)
    g.add_argument("--sessions-max", dest="sessions_max", type=int)
    g.add_argument("--gap-min", dest="gap_min", type=int)
    g.add_argument("--gap-max", dest="gap_max", type=int)
    g.add_argument("--archetype", help="mix like alternating:0.5,frequency:0.5")
    g.add_argument("--liked-categories", dest="liked_categories", type=int)
    g.add_argument("--liked-prob", dest="liked_prob", type=float)
    g.add_argument("--base-prob", dest="base_prob", type=float)
    g.add_argument("--bundle-size", dest="bundle_size", type=int)
    g.add_argument("--period", type=int)
    g.add_argument("--pair-count", dest="pair_count", type=int)
    g.add_argument("--pair-prob", dest="pair_prob", type=float)
    _add_common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, help="dataset JSONL")
    t.add_argument("--vocab", required=True, help="vocab JSON")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--embed-dim", dest="embed_dim", type=int)
    t.add_argument("--num-heads", dest="num_heads", type=int)
    t.add_argument("--encoder-layers", dest="encoder_layers", type=int)
    t.add_argument("--decoder-layers", dest="decoder_layers", type=int)
    t.add_argument("--ffn-dim", dest="ffn_dim", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--positional", choices=[s.value for s in PositionalStrategy])
    t.add_argument("--clip-days", dest="clip_days", type=int)
    t.add_argument("--n-enc", dest="n_enc", type=int)
    t.add_argument("--n-dec", dest="n_dec", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--clip-norm", dest="clip_norm", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--samples-per-customer", dest="samples_per_customer", type=int)
    t.add_argument(
        "--shuffle-within-session",
        dest="shuffle_within_session",
        action="store_const",
        const=True,
    )
    t.add_argument("--min-sessions", dest="min_sessions", type=int)
    t.add_argument("--val-frac", dest="val_frac", type=float)
    _add_common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a system on held-out final baskets")
    e.add_argument("--data", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--system", choices=["trex", "ptop"])
    e.add_argument("--compare", action="store_const", const=True)
    e.add_argument("--ks", help="comma-separated k values")
    e.add_argument("--rank-depth", dest="rank_depth", type=int)
    e.add_argument("--mode", choices=["one_shot", "autoregressive"])
    e.add_argument("--min-sessions", dest="min_sessions", type=int)
    e.add_argument("--val-frac", dest="val_frac", type=float)
    e.add_argument("--figures", dest="figures", action="store_const", const=True)
    e.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    _add_common(e)
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="print top-k categories for one history")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", help="JSONL file with exactly one customer")
    p.add_argument("--history-json", dest="history_json", help="inline customer JSON")
    p.add_argument("-k", "--k", type=int)
    p.add_argument("--mode", choices=["one_shot", "autoregressive"])
    p.add_argument("--partial", help="comma-separated category names already picked")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidConfigError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (
        DataError,
        EvalError,
        TrainerError,
        OSError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
