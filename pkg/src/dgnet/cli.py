"""Command-line entry point: ``dgnet <command> [flags]``."""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .data import load_dataset, make_toy_dataset
from .evaluation import genmetrics, generation, retrieval
from .trainer import (
    CheckpointError, classification_accuracy, load_model, load_teacher, save_teacher, seed_stream,
    train, train_teacher,
)

log = logging.getLogger("dgnet")

DATA_ENV = "DGNET_DATA_ROOT"


class CliError(RuntimeError):
    pass


@contextlib.contextmanager
def out_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{out} is locked by another command (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def build_config(args) -> C.RunConfig:
    overrides = {
        "seed": args.seed, "out": args.out, "checkpoint": args.checkpoint, "teacher": args.teacher,
        "train.total_iters": args.iters, "grid": args.grid, "steps": args.steps, "mode": args.mode,
        "data_root": args.data, "layout": args.layout,
    }
    for item in args.set or []:
        if "=" not in item:
            raise C.ConfigError(item, "--set expects key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = C.resolve_config(args.profile, args.config, overrides)
    if not cfg.data_root:
        cfg.data_root = os.environ.get(DATA_ENV, "")
    return cfg


def _require(path: str, what: str) -> Path:
    if not path:
        raise CliError(f"missing {what}: pass --{what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _train_set(cfg: C.RunConfig):
    if not cfg.data_root:
        raise CliError(f"no dataset root: pass --data or set {DATA_ENV}")
    root = Path(cfg.data_root)
    if cfg.layout == "market_names" and (root / "bounding_box_train").is_dir():
        root = root / "bounding_box_train"
    ds = load_dataset(root, cfg.layout, (cfg.net.height, cfg.net.width))
    cfg.net.num_classes = ds.num_identities
    return ds


def _write_resolved(cfg: C.RunConfig, out: Path):
    (out / "config.resolved.txt").write_text(C.dump_config(cfg))


def config_from_checkpoint(path, base: C.RunConfig) -> C.RunConfig:
    """Adopt the network section stored in a checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    for key, value in C.parse_config_text(blob["config"]).items():
        if key.startswith("net."):
            C.set_key(base, key, value)
    return base


def _pick_by_identity(ds, count: int, rng: np.random.Generator) -> list[int]:
    """One image from each of ``count`` identities (cycling if there are fewer)."""
    ids = list(ds.identities)
    rng.shuffle(ids)
    return [int(rng.choice(ds.indices_of(ids[n % len(ids)]))) for n in range(count)]


# ---------------------------------------------------------------------------
# commands

def cmd_make_toy(args, cfg):
    h, w = (int(v) for v in args.size.lower().split("x"))
    out = make_toy_dataset(cfg.out, args.ids, args.imgs_per_id, (h, w), cfg.seed, force=args.force)
    print(f"wrote {args.ids * args.imgs_per_id} images to {out}")


def cmd_train_teacher(args, cfg):
    out = Path(cfg.out)
    with out_lock(out):
        ds = _train_set(cfg)
        teacher = train_teacher(cfg, ds, log_every=100)
        acc = classification_accuracy(teacher, ds.stack(), torch.from_numpy(ds.labels()))
        path = out / "teacher.pt"
        save_teacher(teacher, cfg, path)
        _write_resolved(cfg, out)
        print(f"teacher saved to {path}; train accuracy {acc:.4f}")


def cmd_train(args, cfg):
    out = Path(cfg.out)
    with out_lock(out):
        ds = _train_set(cfg)
        teacher = None
        if cfg.train.joint:
            if not cfg.teacher:
                raise CliError("joint training needs --teacher (or set train.joint = false)")
            teacher = load_teacher(_require(cfg.teacher, "teacher"), cfg)
        resume = str(_require(cfg.checkpoint, "checkpoint")) if cfg.checkpoint else None
        if not resume and (out / "metrics.tsv").exists():
            (out / "metrics.tsv").unlink()
        train(cfg, ds, out, teacher, resume=resume)
        print(f"training finished; checkpoints and metrics.tsv in {out}")


def _load_for_eval(cfg):
    ckpt = _require(cfg.checkpoint, "checkpoint")
    cfg = config_from_checkpoint(ckpt, cfg)
    return ckpt, load_model(ckpt, cfg), cfg


def cmd_generate(args, cfg):
    ckpt, model, cfg = _load_for_eval(cfg)
    ds = load_dataset(cfg.data_root or _require("", "data"), cfg.layout, (cfg.net.height, cfg.net.width))
    try:
        r, c = (int(v) for v in cfg.grid.lower().split("x"))
    except ValueError:
        raise C.ConfigError("grid", f"expected RxC, got {cfg.grid!r}") from None
    rng = seed_stream(cfg.seed, "eval")
    rows = ds.stack(_pick_by_identity(ds, r, rng))
    cols = ds.stack(_pick_by_identity(ds, c, rng))
    out = Path(cfg.out)
    with out_lock(out):
        _, mosaic = generation.swap_grid(model, rows, cols)
        path = generation.save_image(mosaic, out / f"swap_grid_{r}x{c}.png")
        _write_resolved(cfg, out)
    print(f"wrote {path}")


def cmd_interpolate(args, cfg):
    ckpt, model, cfg = _load_for_eval(cfg)
    ds = load_dataset(cfg.data_root or _require("", "data"), cfg.layout, (cfg.net.height, cfg.net.width))
    rng = seed_stream(cfg.seed, "eval")
    a, b = _pick_by_identity(ds, 2, rng)
    out = Path(cfg.out)
    with out_lock(out):
        images = generation.interpolate(model, cfg.mode, ds.pixels(a), ds.pixels(b), cfg.steps)
        path = generation.save_strip(images, out / f"interpolate_{cfg.mode}_{cfg.steps}.png")
        _write_resolved(cfg, out)
    print(f"wrote {path}")


def _eval_splits(cfg):
    root = Path(cfg.data_root or _require("", "data"))
    size = (cfg.net.height, cfg.net.width)
    if (root / "query").is_dir():
        gallery_dir = root / "bounding_box_test" if (root / "bounding_box_test").is_dir() else root / "gallery"
        q = load_dataset(root / "query", cfg.layout, size, split="query", relabel=False, cache=False)
        g = load_dataset(gallery_dir, cfg.layout, size, split="gallery", relabel=False, cache=False)
        return q, g
    ds = load_dataset(root, cfg.layout, size, relabel=False)
    return ds, ds


def cmd_eval_reid(args, cfg):
    ckpt, model, cfg = _load_for_eval(cfg)
    query, gallery = _eval_splits(cfg)
    out = Path(cfg.out)
    with out_lock(out):
        beta = cfg.weights.beta
        q_emb = retrieval.extract_embedding(model, query.stack(), beta).numpy()
        g_emb = q_emb if gallery is query else retrieval.extract_embedding(model, gallery.stack(), beta).numpy()
        retrieval.export_embeddings(out / "query_embeddings", q_emb, query.records)
        if gallery is not query:
            retrieval.export_embeddings(out / "gallery_embeddings", g_emb, gallery.records)
        result = retrieval.rank_queries(q_emb, query.raw_labels(), query.cameras(),
                                        g_emb, gallery.raw_labels(), gallery.cameras())
        table = retrieval.write_report(out / "reid_metrics.json", result.summary())
        _write_resolved(cfg, out)
    print(table, end="")


def cmd_eval_gen(args, cfg):
    ckpt, model, cfg = _load_for_eval(cfg)
    teacher = load_teacher(_require(cfg.teacher, "teacher"), cfg)
    ds = load_dataset(cfg.data_root or _require("", "data"), cfg.layout, (cfg.net.height, cfg.net.width))
    real = ds.stack()
    labels = ds.labels()
    gen, owners = cross_id_generations(model, real, labels, seed_stream(cfg.seed, "eval"))
    out = Path(cfg.out)
    with out_lock(out):
        embedder = genmetrics.teacher_embedder(teacher)
        metrics = {
            "fid": genmetrics.fid(real, gen, embedder),
            "fid_embedder": "teacher",
            "ssim_intra_generated": genmetrics.ssim_intra_class(
                [gen[owners == i] for i in np.unique(owners)]),
            "ssim_intra_real": genmetrics.ssim_intra_class([real[labels == i] for i in np.unique(labels)]),
        }
        table = retrieval.write_report(out / "gen_metrics.json", metrics)
        _write_resolved(cfg, out)
    print(table, end="")


@torch.no_grad()
def cross_id_generations(model, images: torch.Tensor, labels: np.ndarray, rng: np.random.Generator):
    """One cross-identity image per real image: its appearance, a random other identity's structure.

    Returns the generated batch and the appearance-source identity of each image.
    """
    model.eval()
    labels = np.asarray(labels)
    partners = np.empty(len(labels), dtype=np.int64)
    for n, lab in enumerate(labels):
        pool = np.flatnonzero(labels != lab)
        partners[n] = rng.choice(pool)
    gen = model.decode(model.encode_appearance(images), model.encode_structure(images[partners]))
    return gen, labels.copy()


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train-teacher": cmd_train_teacher,
    "train": cmd_train,
    "generate": cmd_generate,
    "interpolate": cmd_interpolate,
    "eval-reid": cmd_eval_reid,
    "eval-gen": cmd_eval_gen,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--profile", choices=sorted(C.PROFILES))
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--data", help=f"dataset root (falls back to ${DATA_ENV})")
    common.add_argument("--layout", choices=["market_names", "folder_per_id", "manifest"])
    common.add_argument("--checkpoint")
    common.add_argument("--teacher")
    common.add_argument("--iters", type=int)
    common.add_argument("--grid", help="RxC swap grid, e.g. 4x4")
    common.add_argument("--steps", type=int)
    common.add_argument("--mode", choices=["appearance", "structure"])
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dgnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    toy = sub.add_parser("make-toy", parents=[common], help="write the synthetic toy dataset")
    toy.add_argument("--ids", type=int, default=4)
    toy.add_argument("--imgs-per-id", type=int, default=8)
    toy.add_argument("--size", default="64x32")
    toy.add_argument("--force", action="store_true")
    for name in COMMANDS:
        if name != "make-toy":
            sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        COMMANDS[args.command](args, cfg)
    except C.ConfigError as exc:
        print(f"dgnet: invalid config key {exc.key!r}: {exc}", file=sys.stderr)
        return 2
    except (CliError, FileNotFoundError, FileExistsError, CheckpointError, ValueError, RuntimeError) as exc:
        print(f"dgnet: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
