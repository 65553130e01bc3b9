"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthetic
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, load_manifest, select_top_k, split_stratified
from .encoder import (EncoderError, atomic_write_text, init_random_projection, load_checkpoint)
from .evaluation import EvalError, evaluate, render_report
from .pipeline import EmbeddingStore, ImageStore, StoreError
from .preprocess import ClaheConfig, PreprocessError, clahe, load_image, save_png
from .sampler import (EpisodeSpec, EpisodeStream, SamplerError, class_frequency_audit, episode_stream,
                      split_mix)
from .trainer import SEED_TEST, NumericError, train

log = logging.getLogger("protofundus")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EMBEDDING_STORE_FORMAT = "protofundus-embeddings"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _atomic_write_bytes_png(img, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        save_png(img, tmp)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


# --- shared orchestration (also used by the test suite) -----------------------

def prepare_data(cfg: RunConfig):
    manifest = load_manifest(cfg.manifest_path())
    pool = select_top_k(manifest, cfg.top_k)
    splits = split_stratified(pool, cfg.ratios, cfg.split_seed)
    return manifest, pool, splits


def make_store(cfg: RunConfig, manifest) -> ImageStore:
    return ImageStore(manifest, cfg.preprocess, cfg.augment)


def make_test_stream(cfg: RunConfig, episodes: int | None = None, seed: int | None = None) -> EpisodeStream:
    master = split_mix(cfg.train.seed, SEED_TEST) if seed is None else seed
    return EpisodeStream(cfg.spec, "test", master, cfg.eval_episodes if episodes is None else episodes)


def run_train(cfg: RunConfig, progress=None):
    manifest, pool, splits = prepare_data(cfg)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / "config.json", cfg.to_json())
    atomic_write_text(run_dir / "pool.json", json.dumps(pool.to_dict(), indent=2))
    atomic_write_text(run_dir / "splits.json", splits.to_json())
    store = make_store(cfg, manifest)
    tlog, best, last = train(cfg.train, store, splits.view("train"), splits.view("val"), run_dir,
                             progress=progress)
    return run_dir, tlog, best


def run_eval(cfg: RunConfig, embed_fn, out_dir=None, episodes=None, seed=None, pool=None, splits=None):
    if splits is None:
        _, pool, splits = prepare_data(cfg)
    stream = make_test_stream(cfg, episodes, seed)
    report = evaluate(embed_fn, episode_stream(splits.view("test"), stream), pool.classes,
                      cfg.metric, cfg.temperature)
    if out_dir is not None:
        render_report(report, out_dir)
    return report


def load_embedding_store(path) -> EmbeddingStore:
    path = Path(path)
    if not path.is_file():
        raise StoreError(f"embedding store not found: {path}")
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("format") != EMBEDDING_STORE_FORMAT:
        raise StoreError(f"{path}: not an embedding store")
    return EmbeddingStore({rid: np.asarray(v, dtype=np.float64) for rid, v in zip(d["ids"], d["vectors"])})


# --- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    counts = {c: (args.majority if i < 5 else args.minority) for i, c in enumerate(synthetic.SYNTH_CLASSES)}
    path = synthetic.generate(args.out, counts, args.seed)
    print(f"wrote {sum(counts.values())} images and {path}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    ratios = _parse_ratios(args.ratios)
    manifest = load_manifest(args.manifest)
    pool = select_top_k(manifest, args.top_k)
    splits = split_stratified(pool, ratios, args.seed)
    out = Path(args.out)
    atomic_write_text(out / "pool.json", json.dumps(pool.to_dict(), indent=2))
    atomic_write_text(out / "splits.json", splits.to_json())
    print(f"{'class':<12}{'images':>8}{'eligible':>10}{'train':>7}{'val':>6}{'test':>6}")
    for c in pool.classes:
        parts = splits.by_class[c]
        print(f"{c:<12}{manifest.class_counts[c]:>8}{len(pool.eligible[c]):>10}"
              f"{len(parts['train']):>7}{len(parts['val']):>6}{len(parts['test']):>6}")
    if pool.excluded_multi_label:
        print(f"excluded {pool.excluded_multi_label} multi-label records")
    return EXIT_OK


def _parse_ratios(text: str):
    try:
        r = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}") from None
    if len(r) != 3:
        raise UsageError(f"--ratios must have three entries, got {text!r}")
    return r


def _parse_tiles(text: str):
    try:
        tx, ty = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--tiles must look like 8x8, got {text!r}") from None
    return tx, ty


def cmd_clahe(args) -> int:
    tx, ty = _parse_tiles(args.tiles)
    try:
        cfg = ClaheConfig(tx, ty, args.clip)
    except PreprocessError as exc:
        raise UsageError(str(exc)) from None
    img = load_image(args.input)
    out = clahe(img, cfg)
    _atomic_write_bytes_png(out, Path(args.output))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.name:
        cfg = dataclasses.replace(cfg, name=args.name)
    run_dir, tlog, _ = run_train(cfg, progress=print)
    print(f"best epoch {tlog.best_epoch + 1} val_acc={tlog.val_accuracy[tlog.best_epoch]:.4f}; outputs in {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    manifest, pool, splits = prepare_data(cfg)
    if args.embeddings:
        store = load_embedding_store(args.embeddings)
        embed_fn = store.embedder()
        if cfg.train.embed_dim != store.dim:
            log.info("external embeddings have dim %d (config embed_dim %d is unused)", store.dim,
                     cfg.train.embed_dim)
    else:
        if args.baseline:
            params = init_random_projection((cfg.preprocess.downsample,) * 2 + (3,), cfg.train.embed_dim,
                                            args.baseline_seed)
        else:
            if not args.checkpoint:
                raise UsageError("eval needs --checkpoint, --embeddings or --baseline")
            params = load_checkpoint(args.checkpoint)
        if params.embed_dim != cfg.train.embed_dim:
            raise ConfigError(f"checkpoint embed_dim {params.embed_dim} does not match config "
                              f"train.embed_dim {cfg.train.embed_dim}")
        if params.input_dims[0] != cfg.preprocess.downsample:
            raise ConfigError(f"checkpoint expects {params.input_dims[0]}px inputs, config downsample is "
                              f"{cfg.preprocess.downsample}")
        embed_fn = make_store(cfg, manifest).embedder(params)
    out = Path(args.out) if args.out else cfg.run_dir() / "report"
    report = run_eval(cfg, embed_fn, out, args.episodes, args.seed, pool, splits)
    lo, hi = report.ci95
    print(f"episodes={report.episode_count} accuracy={report.mean_accuracy:.4f} "
          f"95% CI=({lo:.4f}, {hi:.4f}) macro_f1={report.macro_f1:.4f} loss={report.mean_loss:.4f}")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_import_embeddings(args) -> int:
    known = None
    if args.manifest:
        known = [r.id for r in load_manifest(args.manifest).records]
    store = EmbeddingStore.from_csv(args.csv, known)
    ids = sorted(store.vectors)
    payload = {"format": EMBEDDING_STORE_FORMAT, "version": 1, "dim": store.dim, "ids": ids,
               "vectors": [store.vectors[i].tolist() for i in ids]}
    atomic_write_text(Path(args.out), json.dumps(payload))
    print(f"imported {len(ids)} embeddings of dim {store.dim} into {args.out}")
    return EXIT_OK


def cmd_sample_episodes(args) -> int:
    cfg = load_config(args.config)
    _, pool, splits = prepare_data(cfg)
    spec = dataclasses.replace(cfg.spec, n_way=args.n_way or cfg.spec.n_way)
    view = splits.view(args.split)
    stream = EpisodeStream(spec, args.split, args.seed, args.count)
    lines = []
    episodes = []
    for ep in episode_stream(view, stream):
        lines.append(ep.to_json())
        episodes.append(ep)
    atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
    counts = class_frequency_audit(episodes, pool.classes)
    expected = args.count * spec.n_way / len(pool.classes)
    print(f"wrote {args.count} episodes to {args.out}; class appearances (expected {expected:.0f} each):")
    for c in pool.classes:
        print(f"  {c:<12}{counts[c]:>8}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protofundus", description="Balanced prototypical few-shot pipeline for fundus images.",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("synth", help="generate the bundled synthetic dataset", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--majority", type=int, default=300, help="images per majority class")
    s.add_argument("--minority", type=int, default=60, help="images per minority class")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="select top-K classes and write pool/split files", formatter_class=fmt)
    s.add_argument("--manifest", required=True, help="CSV manifest (ID,path,<class columns>)")
    s.add_argument("--top-k", type=int, default=10, help="number of most frequent classes kept")
    s.add_argument("--ratios", default="0.7,0.1,0.2", help="train,val,test fractions")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--out", required=True, help="output directory for pool.json and splits.json")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("clahe", help="apply CLAHE to one image", formatter_class=fmt)
    s.add_argument("input", help="input PNG/JPEG")
    s.add_argument("output", help="output PNG")
    s.add_argument("--clip", type=float, default=2.0, help="clip limit, multiple of the uniform bin level")
    s.add_argument("--tiles", default="8x8", help="tile grid, columns x rows")
    s.set_defaults(func=cmd_clahe)

    s = sub.add_parser("train", help="episodic training from a run config", formatter_class=fmt)
    s.add_argument("config", help="run config JSON")
    s.add_argument("--name", default=None, help="override the run name")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="episodic test evaluation and report", formatter_class=fmt)
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--checkpoint", default=None, help="encoder checkpoint (best.ckpt)")
    s.add_argument("--embeddings", default=None, help="embedding store from import-embeddings (variant: external)")
    s.add_argument("--baseline", action="store_true", help="evaluate the random-projection baseline")
    s.add_argument("--baseline-seed", type=int, default=1, help="seed of the random projection")
    s.add_argument("--episodes", type=int, default=None, help="test episodes (default: config eval_episodes, 1000)")
    s.add_argument("--seed", type=int, default=None, help="test stream master seed (default: derived from train.seed)")
    s.add_argument("--out", default=None, help="report directory (default: <run dir>/report)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("import-embeddings", help="import externally computed embeddings", formatter_class=fmt)
    s.add_argument("csv", help="CSV with columns id,e0..e<m-1>")
    s.add_argument("--manifest", default=None, help="manifest whose ids must cover the CSV ids")
    s.add_argument("--out", required=True, help="output embedding store (JSON)")
    s.set_defaults(func=cmd_import_embeddings)

    s = sub.add_parser("sample-episodes", help="dump episodes as JSON lines and audit class balance",
                       formatter_class=fmt)
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.add_argument("--count", type=int, default=1000, help="number of episodes")
    s.add_argument("--seed", type=int, default=0, help="stream master seed")
    s.add_argument("--n-way", type=int, default=None, help="override the config n_way")
    s.add_argument("--out", required=True, help="output .jsonl path")
    s.set_defaults(func=cmd_sample_episodes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, SamplerError, StoreError, PreprocessError, EncoderError, EvalError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
