"""Command-line driver: data generation, codec and flow training, sampling, evaluation.

Exit codes: 0 success, 2 configuration error, 3 data/ingestion error,
4 numeric error or diverged training.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt_io
from . import metrics
from .config import ExperimentConfig, load_config
from .data import (
    DatasetPair,
    generate_synthetic,
    load_pair_directory,
    normalize_image,
    split,
    write_pair_directory,
)
from .errors import ConfigError, FlowSegError, IngestionError
from .flow import train_flow
from .nets import Codec, VelocityNet
from .sampler import ensemble, write_ensemble
from .training import TrainState
from .vae import eval_reconstruction, train_vae

log = logging.getLogger("flowseg")

SPLITS = ("train", "val", "test")


def data_root(cfg: ExperimentConfig) -> Path:
    if cfg.data.source == "directory":
        return Path(cfg.data.directory)
    return Path(cfg.paths.data_dir)


def load_splits(cfg: ExperimentConfig) -> dict[str, list[DatasetPair]]:
    pairs = load_pair_directory(data_root(cfg), cfg.data.size, cfg.data.channels)
    return dict(zip(SPLITS, split(pairs, cfg.data.fractions, cfg.data.seed)))


def checkpoint_path(cfg: ExperimentConfig, stage: str, last: bool = False) -> Path:
    name = f"flow-{cfg.flow.space}" if stage == "flow" else stage
    return Path(cfg.paths.checkpoint_dir) / (f"{name}.last.ckpt" if last else f"{name}.ckpt")


def write_log(path: Path, header: tuple[str, ...], records: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for rec in records:
        lines.append(",".join(repr(rec[k]) if isinstance(rec[k], float) else str(rec[k]) for k in header))
    path.write_text("\n".join(lines) + "\n")


def _state_from(ck: ckpt_io.Checkpoint) -> TrainState:
    extra = ck.extra
    return TrainState(
        epoch=ck.epoch,
        model=ck.group("model"),
        optimizer=ckpt_io.optimizer_state(ck),
        best_model=ck.group("best"),
        best_loss=extra["best_loss"],
        best_epoch=extra["best_epoch"],
        log=extra["log"],
    )


def _save_last(path: Path, stage: str, cfg: ExperimentConfig, seed: int, state: TrainState):
    ckpt_io.save_checkpoint(
        path,
        stage=stage,
        config=cfg.to_dict(),
        seed=seed,
        epoch=state.epoch,
        model=state.model,
        best=state.best_model,
        optimizer=state.optimizer,
        extra={"best_loss": state.best_loss, "best_epoch": state.best_epoch, "log": state.log},
    )


def _save_best(path: Path, stage: str, cfg: ExperimentConfig, seed: int, state: TrainState, extra=None):
    ckpt_io.save_checkpoint(
        path,
        stage=stage,
        config=cfg.to_dict(),
        seed=seed,
        epoch=state.best_epoch,
        model=state.best_model,
        extra={"best_loss": state.best_loss, **(extra or {})},
    )


def load_codec(cfg: ExperimentConfig, which: str) -> Codec:
    stage = f"{which}-vae"
    path = checkpoint_path(cfg, stage)
    if not path.is_file():
        raise ConfigError(f"missing checkpoint: {stage}")
    codec = Codec(cfg.codec_config(which))
    ckpt_io.load_into(ckpt_io.load_checkpoint(path), codec)
    codec.trained = True
    codec.eval()
    return codec


def load_codecs(cfg: ExperimentConfig):
    if cfg.flow.space == "pixel":
        return None
    return load_codec(cfg, "image"), load_codec(cfg, "mask")


def load_flow_net(cfg: ExperimentConfig) -> VelocityNet:
    path = checkpoint_path(cfg, "flow")
    if not path.is_file():
        raise ConfigError(f"missing checkpoint: flow ({cfg.flow.space})")
    net = VelocityNet(cfg.flow_net_config())
    ckpt_io.load_into(ckpt_io.load_checkpoint(path), net)
    net.eval()
    return net


def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> Path:
    if cfg.data.source != "synthetic":
        raise ConfigError("gen-data requires data.source: synthetic")
    root = Path(cfg.paths.data_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ConfigError(f"output directory {root} is not empty; pass --force to overwrite")
        for sub in ("images", "masks"):
            if (root / sub).is_dir():
                shutil.rmtree(root / sub)
    pairs = generate_synthetic(cfg.data.synthetic_spec())
    write_pair_directory(pairs, root)
    print(f"wrote {len(pairs)} pairs to {root}")
    return root


def cmd_train_vae(cfg: ExperimentConfig, which: str, resume: bool = False) -> Path:
    if which not in ("image", "mask"):
        raise ConfigError(f"--which must be image or mask, got {which!r}")
    splits = load_splits(cfg)
    stage = f"{which}-vae"
    sec = cfg.vae.image if which == "image" else cfg.vae.mask
    seed = cfg.vae.seed
    torch.manual_seed(seed)
    codec = Codec(cfg.codec_config(which))

    last_path = checkpoint_path(cfg, stage, last=True)
    state = None
    if resume:
        ck = ckpt_io.load_checkpoint(last_path)
        ckpt_io.verify_against(ck, codec)
        state = _state_from(ck)
    log_path = Path(cfg.paths.output_dir) / "logs" / f"{stage}.csv"

    def on_epoch(st: TrainState):
        _save_last(last_path, stage, cfg, seed, st)
        write_log(log_path, ("epoch", "split", "loss", "rec", "kl"), st.log)

    result = train_vae(
        splits["train"], codec, sec.optim(), sec.epochs, seed,
        mode=which, beta=sec.beta, val=splits["val"], resume=state, on_epoch=on_epoch,
    )
    out = checkpoint_path(cfg, stage)
    _save_best(out, stage, cfg, seed, result.state)
    print(f"{stage}: best epoch {result.state.best_epoch}, loss {result.state.best_loss:.6f} -> {out}")
    return out


def cmd_train_flow(cfg: ExperimentConfig, resume: bool = False) -> Path:
    codecs = load_codecs(cfg)
    splits = load_splits(cfg)
    seed = cfg.flow.seed
    torch.manual_seed(seed)
    net = VelocityNet(cfg.flow_net_config())

    last_path = checkpoint_path(cfg, "flow", last=True)
    state = None
    if resume:
        ck = ckpt_io.load_checkpoint(last_path)
        ckpt_io.verify_against(ck, net)
        state = _state_from(ck)
    log_path = Path(cfg.paths.output_dir) / "logs" / f"flow-{cfg.flow.space}.csv"

    def on_epoch(st: TrainState):
        _save_last(last_path, "flow", cfg, seed, st)
        write_log(log_path, ("epoch", "split", "fm_loss"), st.log)

    result = train_flow(
        splits["train"], net, cfg.flow.optim(), cfg.flow.epochs, seed,
        codecs=codecs, config=cfg.flow.flow_config(), val=splits["val"],
        resume=state, on_epoch=on_epoch,
    )
    out = checkpoint_path(cfg, "flow")
    _save_best(out, "flow", cfg, seed, result.state, extra={"space": cfg.flow.space})
    print(f"flow[{cfg.flow.space}]: best epoch {result.state.best_epoch}, "
          f"fm_loss {result.state.best_loss:.6f} -> {out}")
    return out


def _resolve_target(cfg: ExperimentConfig, target: str) -> tuple[str, np.ndarray]:
    path = Path(target)
    if path.is_file():
        try:
            with Image.open(path) as im:
                im = im.convert("RGB" if cfg.data.channels == 3 else "L")
        except OSError as exc:
            raise IngestionError(f"unreadable file: {path}") from exc
        if im.size != (cfg.data.size, cfg.data.size):
            im = im.resize((cfg.data.size, cfg.data.size), Image.BILINEAR)
        pixels = np.asarray(im)
        if pixels.ndim == 2:
            pixels = pixels[..., None]
        return path.stem, normalize_image(pixels)
    pairs = load_pair_directory(data_root(cfg), cfg.data.size, cfg.data.channels)
    for pair in pairs:
        if pair.id == target:
            return pair.id, pair.image
    raise IngestionError(f"no image with id or path {target!r}")


def cmd_sample(cfg: ExperimentConfig, target: str) -> list[Path]:
    codecs = load_codecs(cfg)
    net = load_flow_net(cfg)
    item_id, image = _resolve_target(cfg, target)
    s = cfg.sample
    result = ensemble(net, codecs, image, s.n, s.base_seed, s.ode(), cfg.flow.space)
    out_dir = Path(cfg.paths.output_dir) / "samples" / cfg.flow.space
    paths = write_ensemble(result, out_dir, item_id)
    print(f"{item_id}: foreground fraction {float(result.fused.mean()):.4f}, "
          f"mean confidence {float(result.confidence.mean()):.6f}, {len(paths)} files in {out_dir}")
    return paths


def cmd_eval(cfg: ExperimentConfig, split_name: str = "test", reconstruction: bool = False,
             save_outputs: bool = False) -> Path:
    if split_name not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split_name!r}")
    codecs = load_codecs(cfg)
    net = load_flow_net(cfg)
    pairs = load_splits(cfg)[split_name]
    if not pairs:
        raise ConfigError(f"split {split_name!r} is empty")
    s = cfg.sample
    out_dir = Path(cfg.paths.output_dir)
    items = []
    for pair in pairs:
        res = ensemble(net, codecs, pair.image, s.n, s.base_seed, s.ode(), cfg.flow.space)
        member_dice = [metrics.dice(m >= 0.5, pair.mask) for m in res.samples]
        member_iou = [metrics.iou(m >= 0.5, pair.mask) for m in res.samples]
        items.append({
            "id": pair.id,
            "dice": metrics.dice(res.fused, pair.mask),
            "iou": metrics.iou(res.fused, pair.mask),
            "sample_dice": float(np.mean(member_dice)),
            "sample_iou": float(np.mean(member_iou)),
            "mean_confidence": float(res.confidence.mean()),
        })
        if save_outputs:
            write_ensemble(res, out_dir / "samples" / cfg.flow.space, pair.id)
    fused = metrics.MetricReport.aggregate(items)
    report = {
        "split": split_name,
        "space": cfg.flow.space,
        "count": len(items),
        "fused": {"dice": fused.dice, "iou": fused.iou},
        "per_sample": {
            "dice": float(np.mean([it["sample_dice"] for it in items])),
            "iou": float(np.mean([it["sample_iou"] for it in items])),
        },
        "mean_confidence": float(np.mean([it["mean_confidence"] for it in items])),
        "items": items,
        "config": cfg.to_dict(),
    }
    if reconstruction:
        image_codec = codecs[0] if codecs else load_codec(cfg, "image")
        mask_codec = codecs[1] if codecs else load_codec(cfg, "mask")
        report["reconstruction"] = {
            "image": eval_reconstruction(pairs, image_codec, "image").summary(),
            "mask": eval_reconstruction(pairs, mask_codec, "mask").summary(),
        }
    path = out_dir / f"eval_{cfg.flow.space}_{split_name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"[{split_name}/{cfg.flow.space}] fused dice {metrics.format_value(fused.dice)} "
          f"iou {metrics.format_value(fused.iou)} over {len(items)} items -> {path}")
    return path


SEED_TARGETS = {
    "gen-data": ("data", "seed"),
    "train-vae": ("vae", "seed"),
    "train-flow": ("flow", "seed"),
    "sample": ("sample", "base_seed"),
    "eval": ("sample", "base_seed"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the seed used by this command")
    common.add_argument("--threads", type=int, help="cap torch worker threads")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="flowseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    p = sub.add_parser("train-vae", parents=[common], help="train the image or mask codec")
    p.add_argument("--which", choices=("image", "mask"), required=True)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("train-flow", parents=[common], help="train the velocity field")
    p.add_argument("--space", choices=("latent", "pixel"), help="override flow.space")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("sample", parents=[common], help="ensemble-sample one image")
    p.add_argument("target", help="dataset id or image path")
    p.add_argument("--space", choices=("latent", "pixel"))
    p.add_argument("-n", type=int, help="override sample.n")
    p = sub.add_parser("eval", parents=[common], help="evaluate a split")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--space", choices=("latent", "pixel"))
    p.add_argument("--reconstruction", action="store_true", help="also score codec reconstructions")
    p.add_argument("--save-outputs", action="store_true", help="write per-image ensemble files")
    sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None and args.command in SEED_TARGETS:
        section, key = SEED_TARGETS[args.command]
        setattr(getattr(cfg, section), key, args.seed)
    if getattr(args, "space", None):
        cfg.flow.space = args.space
    if getattr(args, "n", None) is not None:
        cfg.sample.n = args.n
    cfg.validate()
    if args.threads:
        torch.set_num_threads(args.threads)

    if args.command == "print-config":
        sys.stdout.write(cfg.dump())
    elif args.command == "gen-data":
        cmd_gen_data(cfg, force=args.force)
    elif args.command == "train-vae":
        cmd_train_vae(cfg, args.which, resume=args.resume)
    elif args.command == "train-flow":
        cmd_train_flow(cfg, resume=args.resume)
    elif args.command == "sample":
        cmd_sample(cfg, args.target)
    elif args.command == "eval":
        cmd_eval(cfg, args.split, reconstruction=args.reconstruction, save_outputs=args.save_outputs)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        return run(args)
    except FlowSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
