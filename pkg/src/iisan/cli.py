"""Command-line surface: gen | cache | train | eval | profile.

Configuration is line-oriented `key = value` text with `#` comments; flags
override file values, which override defaults. Every command echoes the
resolved config and its hash so reports are reproducible. Exit statuses:
0 success, 2 config error, 3 input error, 4 stale artifact, 5 failed
ordering verdict.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import costmodel, recsys
from .backbone import EncoderConfig, IMAGE_TOKEN_COUNT, TEXT_TOKEN_COUNT, build_encoder
from .cache import CacheStore, build_cache, verify_cache
from .errors import ConfigError, IisanError, InputError, StalenessError
from .sanet import (MODE_ASYM_EVEN_ALL, MODE_SYMMETRIC_EVEN, MODES, select_layers)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_STALE = 4
EXIT_VERDICT = 5


@dataclass
class RunConfig:
    variant: str = "vs"
    seed: int = 7
    regime: str = "dpeft_cached"
    out: str = "runs"
    data: str = ""
    cache_dir: str = ""
    checkpoint: str = ""

    text_layers: int = 12
    text_hidden: int = 64
    text_vocab: int = 512
    text_max_positions: int = 32
    text_seed: int = 11
    text_mode: str = ""

    image_layers: int = 12
    image_hidden: int = 64
    image_vocab: int = 256
    image_max_positions: int = 32
    image_seed: int = 22

    san_bottleneck: int = 16
    seq_dim: int = 64
    seq_blocks: int = 2
    seq_heads: int = 2
    seq_max_len: int = 10

    train_batch: int = 32
    train_lr: float = 1e-4
    train_epochs: int = 5
    train_dropout: float = 0.1

    gen_users: int = 200
    gen_items: int = 50
    gen_strength: float = 0.9
    gen_min_len: int = 8
    gen_max_len: int = 16

    profile_batch: int = 32


_KEYS = {
    "variant": "variant", "seed": "seed", "regime": "regime", "out": "out",
    "data": "data", "cache_dir": "cache_dir", "checkpoint": "checkpoint",
    "text.layers": "text_layers", "text.hidden": "text_hidden", "text.vocab": "text_vocab",
    "text.max_positions": "text_max_positions", "text.seed": "text_seed", "text.mode": "text_mode",
    "image.layers": "image_layers", "image.hidden": "image_hidden", "image.vocab": "image_vocab",
    "image.max_positions": "image_max_positions", "image.seed": "image_seed",
    "san.bottleneck": "san_bottleneck",
    "seq.dim": "seq_dim", "seq.blocks": "seq_blocks", "seq.heads": "seq_heads",
    "seq.max_len": "seq_max_len",
    "train.batch": "train_batch", "train.lr": "train_lr", "train.epochs": "train_epochs",
    "train.dropout": "train_dropout",
    "gen.users": "gen_users", "gen.items": "gen_items", "gen.strength": "gen_strength",
    "gen.min_len": "gen_min_len", "gen.max_len": "gen_max_len",
    "profile.batch": "profile_batch",
}
_FIELD_TO_KEY = {v: k for k, v in _KEYS.items()}


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def build_config(file_values: dict[str, str], overrides: dict[str, str]) -> RunConfig:
    """Precedence: flags (overrides) > file > defaults."""
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    merged = dict(file_values)
    merged.update(overrides)
    for key, raw in merged.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr = _KEYS[key]
        kind = types[attr]
        try:
            if kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            else:
                value = raw
        except ValueError as exc:
            raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc
        setattr(cfg, attr, value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.variant not in ("vs", "va"):
        raise ConfigError(f"variant must be vs or va, got {cfg.variant!r}")
    if cfg.regime not in (costmodel.DPEFT_CACHED, costmodel.DPEFT_UNCACHED):
        raise ConfigError(f"training regime must be dpeft_cached or dpeft_uncached, got {cfg.regime!r}")
    if cfg.text_mode and cfg.text_mode not in MODES:
        raise ConfigError(f"unknown text.mode {cfg.text_mode!r}")
    if not (0.0 <= cfg.gen_strength <= 1.0):
        raise ConfigError("gen.strength must lie in [0, 1]")
    if cfg.text_max_positions < TEXT_TOKEN_COUNT or cfg.image_max_positions < IMAGE_TOKEN_COUNT:
        raise ConfigError("encoder max_positions too small for synthetic item token counts")


def config_lines(cfg: RunConfig) -> list[str]:
    return [f"{_FIELD_TO_KEY[f.name]} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256("\n".join(config_lines(cfg)).encode()).hexdigest()[:12]


def _resolve_paths(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.data = cfg.data or str(out / "interactions.tsv")
    cfg.cache_dir = cfg.cache_dir or str(out / "cache")
    cfg.checkpoint = cfg.checkpoint or str(out / "model.ckpt")


def _echo(cfg: RunConfig) -> None:
    print(f"CONFIG hash={config_hash(cfg)}")
    for line in config_lines(cfg):
        print(f"  {line}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    users: int
    items: int
    strength: float  # probability the next item follows the planted transition table
    min_len: int
    max_len: int
    seed: int


def generate_synthetic(spec: SyntheticSpec, path) -> dict:
    """Markov-planted interactions: with probability `strength` the next item is
    table[current], otherwise uniform. strength 1.0 is fully predictable."""
    if spec.items < 11:
        raise ConfigError(f"need at least 11 items for a meaningful HR@10, got {spec.items}")
    if not (0.0 <= spec.strength <= 1.0):
        raise ConfigError("strength must lie in [0, 1]")
    if not (3 <= spec.min_len <= spec.max_len):
        raise ConfigError("sequence lengths must satisfy 3 <= min_len <= max_len")
    rng = np.random.default_rng(spec.seed)
    table = rng.permutation(spec.items)
    users = {}
    for user in range(1, spec.users + 1):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq = [int(rng.integers(spec.items))]
        for _ in range(length - 1):
            if rng.uniform() < spec.strength:
                seq.append(int(table[seq[-1]]))
            else:
                seq.append(int(rng.integers(spec.items)))
        users[user] = seq
    recsys.save_interactions(path, users)
    return {"users": spec.users, "items": spec.items, "path": str(path),
            "transitions": table.tolist()}


# ---------------------------------------------------------------------------
# shared wiring
# ---------------------------------------------------------------------------

def encoder_configs(cfg: RunConfig) -> tuple[EncoderConfig, EncoderConfig]:
    text = EncoderConfig("text", cfg.text_layers, cfg.text_hidden,
                         cfg.text_vocab, cfg.text_max_positions, cfg.text_seed)
    image = EncoderConfig("image", cfg.image_layers, cfg.image_hidden,
                          cfg.image_vocab, cfg.image_max_positions, cfg.image_seed)
    return text, image


def plans(cfg: RunConfig):
    image_plan = select_layers(MODE_SYMMETRIC_EVEN, cfg.image_layers)
    if cfg.variant == "vs":
        text_plan = select_layers(MODE_SYMMETRIC_EVEN, cfg.text_layers)
    else:
        text_plan = select_layers(cfg.text_mode or MODE_ASYM_EVEN_ALL,
                                  cfg.text_layers, cfg.image_layers)
    return text_plan, image_plan


def _cache_paths(cfg: RunConfig) -> tuple[Path, Path]:
    d = Path(cfg.cache_dir)
    return d / "text.iisc", d / "image.iisc"


def _build_rec_model(cfg: RunConfig) -> recsys.RecModel:
    return recsys.build_rec_model(
        cfg.variant, cfg.text_layers, cfg.text_hidden, cfg.image_layers, cfg.image_hidden,
        text_mode=(cfg.text_mode or None) if cfg.variant == "va" else None,
        bottleneck=cfg.san_bottleneck, dseq=cfg.seq_dim, seq_blocks=cfg.seq_blocks,
        seq_heads=cfg.seq_heads, max_seq_len=cfg.seq_max_len, seed=cfg.seed)


def _provider(cfg: RunConfig):
    text_cfg, image_cfg = encoder_configs(cfg)
    text_plan, image_plan = plans(cfg)
    text_enc = build_encoder(text_cfg)
    image_enc = build_encoder(image_cfg)
    if cfg.regime == costmodel.DPEFT_UNCACHED:
        return recsys.EncodeStateProvider(text_enc, image_enc, text_plan, image_plan)
    text_path, image_path = _cache_paths(cfg)
    try:
        text_store = CacheStore(text_path, expected_fingerprint=text_enc.fingerprint)
        image_store = CacheStore(image_path, expected_fingerprint=image_enc.fingerprint)
    except FileNotFoundError as exc:
        raise StalenessError(
            f"cache file missing ({exc.filename}); run `iisan cache` first") from exc
    return recsys.CachedStateProvider(text_store, image_store, text_plan, image_plan)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    _echo(cfg)
    spec = SyntheticSpec(cfg.gen_users, cfg.gen_items, cfg.gen_strength,
                         cfg.gen_min_len, cfg.gen_max_len, cfg.seed)
    summary = generate_synthetic(spec, cfg.data)
    print(f"GEN users={summary['users']} items={summary['items']} path={summary['path']}")
    return EXIT_OK


def cmd_cache(cfg: RunConfig) -> int:
    _echo(cfg)
    dataset = recsys.load_interactions(cfg.data)
    text_cfg, image_cfg = encoder_configs(cfg)
    text_plan, image_plan = plans(cfg)
    Path(cfg.cache_dir).mkdir(parents=True, exist_ok=True)
    text_path, image_path = _cache_paths(cfg)
    for enc_cfg, plan, path in ((text_cfg, text_plan, text_path),
                                (image_cfg, image_plan, image_path)):
        encoder = build_encoder(enc_cfg)
        summary = build_cache(encoder, list(dataset.catalog), plan.cache_layers(), path)
        report = verify_cache(path)
        if not report.ok:
            print(str(report))
            return EXIT_INPUT
        print(f"CACHE modality={enc_cfg.modality} path={summary.path} "
              f"fingerprint={summary.encoder_fingerprint:#018x} items={summary.item_count} "
              f"bytes={summary.byte_size}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _echo(cfg)
    dataset = recsys.load_interactions(cfg.data)
    split = recsys.split_leave_one_out(dataset)
    popularity = recsys.compute_popularity(split)
    provider = _provider(cfg)
    rec = _build_rec_model(cfg)
    tc = recsys.TrainConfig(lr=cfg.train_lr, batch_size=cfg.train_batch,
                            epochs=cfg.train_epochs, dropout=cfg.train_dropout,
                            seed=cfg.seed, max_seq_len=cfg.seq_max_len)
    result = recsys.train(rec, split, popularity, provider, tc)

    curve_path = Path(cfg.out) / "loss_curve.tsv"
    with open(curve_path, "w", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash(cfg)}\n")
        for epoch, loss in enumerate(result.epoch_losses, 1):
            f.write(f"{epoch}\t{loss:.9f}\n")
    recsys.save_rec_checkpoint(cfg.checkpoint, rec)

    for epoch, loss in enumerate(result.epoch_losses, 1):
        print(f"LOSS epoch={epoch} value={loss:.9f}")
    print(f"TRAIN steps={result.steps} checkpoint={cfg.checkpoint} curve={curve_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, baseline: bool = False) -> int:
    _echo(cfg)
    if not Path(cfg.checkpoint).exists():
        raise InputError(f"checkpoint {cfg.checkpoint} not found; run `iisan train` first")
    rec = recsys.load_rec_checkpoint(cfg.checkpoint)
    dataset = recsys.load_interactions(cfg.data)
    split = recsys.split_leave_one_out(dataset)
    provider = _provider(cfg)
    tc = recsys.TrainConfig(max_seq_len=cfg.seq_max_len)
    report = recsys.evaluate(rec, split, provider, tc)
    print(f"EVAL users={report.evaluated_user_count} dropped={split.dropped_users}")
    print(report.machine_line())
    if baseline:
        popularity = recsys.compute_popularity(split)
        base = recsys.popularity_baseline(split, popularity)
        print(f"BASELINE hr10={base.hr_at_10:.6f} ndcg10={base.ndcg_at_10:.6f} "
              f"users={base.evaluated_user_count}")
    return EXIT_OK


def cmd_profile(cfg: RunConfig) -> int:
    _echo(cfg)
    text_cfg, image_cfg = encoder_configs(cfg)
    san = costmodel.SanSpec(variant=cfg.variant, bottleneck=cfg.san_bottleneck,
                            dseq=cfg.seq_dim, seq_blocks=cfg.seq_blocks,
                            seq_heads=cfg.seq_heads, seq_len=cfg.seq_max_len)
    reports = [costmodel.estimate(text_cfg, image_cfg, san, regime,
                                  batch=cfg.profile_batch,
                                  seq_lens=(TEXT_TOKEN_COUNT, IMAGE_TOKEN_COUNT),
                                  catalog_items=cfg.gen_items)
               for regime in costmodel.REGIMES]
    comparison = costmodel.compare(reports)
    for line in comparison.lines:
        print(line)
    for report in reports:
        print(report.machine_line())
    print(f"ORDERING {comparison.verdict}")
    return EXIT_OK if comparison.verdict == "PASS" else EXIT_VERDICT


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iisan", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("gen", "generate a synthetic interaction file"),
                            ("cache", "encode the catalog and write hidden-state caches"),
                            ("train", "train the towers and sequential encoder"),
                            ("eval", "rank held-out items over the full catalog"),
                            ("profile", "print per-regime cost estimates and the ordering verdict")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory (default: runs)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name == "eval":
            p.add_argument("--baseline", action="store_true",
                           help="also print the popularity baseline metrics")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        overrides: dict[str, str] = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["out"] = args.out
        cfg = build_config(file_values, overrides)
        _resolve_paths(cfg)

        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "cache":
            return cmd_cache(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, baseline=args.baseline)
        if args.command == "profile":
            return cmd_profile(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StalenessError as exc:
        print(f"stale artifact: {exc}", file=sys.stderr)
        return EXIT_STALE
    except IisanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
