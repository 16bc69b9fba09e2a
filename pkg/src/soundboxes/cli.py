"""Command line entry point: gen-data, train, infer, eval, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import audio as au
from .config import RunConfig, desk_config, load_config, save_config
from .dataset import (generate_corpus, generate_duet, load_real_pair, save_sample, validation_pairs,
                      write_manifest)
from .errors import ConfigError, DataError, InvalidInputError
from .pipeline import (ProposalCache, evaluate, infer, init_state, load_checkpoint, prepare_solo,
                       save_checkpoint, selection_accuracy, train)

logger = logging.getLogger("soundboxes")

EXIT_CONFIG = 2
EXIT_DATA = 3


@dataclass
class _RealSolo:
    image: np.ndarray
    audio: au.AudioClip
    sample_id: str
    category_id: int = -1
    gt_box: object = None


def _fit_length(clip: au.AudioClip, n: int) -> au.AudioClip:
    x = clip.samples[:n]
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    return au.AudioClip(x, clip.sample_rate)


def _resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size:
        return img
    pil = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0


def build_solos(cfg: RunConfig):
    """Train and validation solo samples for the configured data source."""
    d = cfg.data
    if d.source == "synthetic":
        corpus = generate_corpus(d.n_train, d.n_val, cfg.scene_config(), seed=d.split_seed)
        return corpus.train, corpus.val
    if not d.root:
        raise ConfigError("data.root is required for the real data source")
    out = []
    for split in ("train", "val"):
        items = [_RealSolo(_resize_image(img, d.image_size), _fit_length(clip, cfg.audio.clip_samples),
                           f"{split}-{k}")
                 for k, (img, clip) in enumerate(load_real_pair(d.root, split, cfg.audio.sample_rate,
                                                                salt=d.split_seed))]
        out.append(items)
    return out[0], out[1]


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "head", None) is not None:
        overrides["model.head"] = args.head
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = args.steps
    return cfg.replace(**overrides) if overrides else cfg


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _read_audio(path, rate: int) -> au.AudioClip:
    try:
        return au.read_wav(path, target_rate=rate)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read audio {path}: {exc}") from exc


# --- subcommands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    n_train = args.n_train if args.n_train is not None else cfg.data.n_train
    n_val = args.n_val if args.n_val is not None else cfg.data.n_val
    corpus = generate_corpus(n_train, n_val, cfg.scene_config(), seed=cfg.data.split_seed)
    records = []
    for split, samples in (("train", corpus.train), ("val", corpus.val)):
        for s in samples:
            path = save_sample(s, out / split)
            records.append({"split": split, "sample_id": s.sample_id, "category_id": s.category_id,
                            "path": str(path.relative_to(out))})
    rng = np.random.default_rng([cfg.data.split_seed, 3])
    for k in range(args.duets):
        a, b = rng.choice(cfg.data.n_categories, 2, replace=False)
        d = generate_duet(int(a), int(b), k, cfg.scene_config())
        path = save_sample(d, out / "duets")
        records.append({"split": "duet", "sample_id": d.sample_id, "categories": [int(a), int(b)],
                        "path": str(path.relative_to(out))})
    write_manifest(out / "manifest.jsonl", records)
    save_config(cfg, out / "config.yaml")
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_solos, val_solos = build_solos(cfg)
    cache = ProposalCache()
    prepared = [prepare_solo(s, cfg, cache) for s in train_solos]
    state = init_state(cfg)
    train(state, prepared)
    out = save_checkpoint(state, args.out)
    summary = {"step": state.step, "running_loss": state.running_loss, "config_hash": state.config_hash}
    if args.eval_pairs and val_solos:
        val = [prepare_solo(s, cfg, cache) for s in val_solos]
        report = evaluate(state.model, val, validation_pairs(val, args.eval_pairs, cfg.data.split_seed), cfg,
                          csv_path=out / "val_metrics.csv")
        summary["val"] = report.summary
        if all(getattr(v, "gt_box", None) is not None for v in val):
            summary["selection_accuracy"] = selection_accuracy(state.model, val)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    image = _read_image(args.image)
    clip = _fit_length(_read_audio(args.audio, cfg.audio.sample_rate), cfg.audio.clip_samples)
    res = infer(image, clip, state.model, cfg, image_id=Path(args.image).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .plotting import save_mask_png
    for k, (c, m) in enumerate(zip(res.clips, res.masks)):
        au.write_wav(out / f"source{k}.wav", c)
        save_mask_png(out / f"mask{k}.png", m)
    record = res.selection.to_dict(Path(args.image).stem)
    record["boxes"] = [b.to_dict() for b in res.boxes]
    (out / "selection.json").write_text(json.dumps(record, indent=2))
    print(json.dumps(record))
    return 0


def cmd_eval(args) -> int:
    if args.mode == "model":
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required in model mode")
        state = load_checkpoint(args.checkpoint)
        cfg, model = state.cfg, state.model
    else:
        cfg, model = _resolve_config(args), None
    _, val_solos = build_solos(cfg)
    val = [prepare_solo(s, cfg) for s in val_solos]
    n_pairs = args.pairs or cfg.data.n_val_pairs
    report = evaluate(model, val, validation_pairs(val, n_pairs, cfg.data.split_seed), cfg, mode=args.mode,
                      csv_path=args.out)
    print(json.dumps(report.summary))
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_separation
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    image = _read_image(args.image)
    clip = _fit_length(_read_audio(args.audio, cfg.audio.sample_rate), cfg.audio.clip_samples)
    res = infer(image, clip, state.model, cfg)
    spec = au.stft(clip, cfg.stft_config())
    plot_separation(args.out, image, res.boxes, spec, res.masks,
                    proposals=res.proposals if args.show_proposals else None, title=Path(args.image).stem)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soundboxes", description="Audio-visual separation with box selection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--head", choices=("sigmoid", "softmax"))

    g = sub.add_parser("gen-data", help="write synthetic solos and duets to disk")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--duets", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and save a checkpoint")
    common(t)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--eval-pairs", type=int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="separate a duet image + mixture")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--audio", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="bss_eval on validation pairs")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--mode", choices=("model", "ideal", "identity"), default="model")
    e.add_argument("--pairs", type=int)
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="box / spectrogram / mask overlay figure")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--image", required=True)
    pl.add_argument("--audio", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--show-proposals", action="store_true")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
