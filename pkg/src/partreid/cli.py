"""Command-line entry point: ``partreid <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import load_config
from .engine import VARIANTS, ablate, format_table, load_model, train
from .evaluation import evaluate
from .synthetic import DataConfig, export_splits, import_splits, make_splits, stack_split

log = logging.getLogger("partreid")

# argmax overlay colours: background, then one per part
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25],
    [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
], dtype=np.uint8)


def _load_data(data_dir, data_cfg: DataConfig | None):
    if data_dir is not None:
        splits, cfg = import_splits(data_dir)
        return splits, cfg
    if data_cfg is None:
        raise SystemExit("no --data given and the checkpoint carries no dataset config")
    return make_splits(data_cfg), data_cfg


def cmd_generate_data(args) -> int:
    data_cfg, _ = load_config(args.config) if args.config else (DataConfig(), None)
    manifest = export_splits(make_splits(data_cfg), data_cfg, args.out)
    print(json.dumps(manifest["counts"]))
    return 0


def cmd_train(args) -> int:
    file_data_cfg, cfg = load_config(args.config)
    splits, data_cfg = _load_data(args.data, file_data_cfg)
    trainer = train(cfg, splits, data_cfg, args.out)
    print(json.dumps(trainer.history[-1]))
    return 0


def cmd_eval(args) -> int:
    model, cfg, data_cfg = load_model(args.checkpoint)
    splits, _ = _load_data(args.data, data_cfg)
    mu = cfg.visibility_threshold if args.threshold is None else args.threshold
    report, dm = evaluate(model, stack_split(splits.query), stack_split(splits.gallery), mu)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json())
    if args.dump_distances:
        np.save(args.dump_distances, dm.values)
    print(report.to_json())
    return 0


def parse_sample_id(text: str) -> tuple[str, int]:
    """``"query:3"`` -> ``("query", 3)``; a bare integer indexes the query split."""
    split, _, index = text.rpartition(":")
    split = split or "query"
    if split not in ("train", "query", "gallery"):
        raise ValueError(f"unknown split {split!r} in sample id {text!r}")
    return split, int(index)


def attention_images(attention: np.ndarray) -> tuple[list, Image.Image]:
    """Grayscale image per channel (value = round(255 p)) plus a colour argmax overlay."""
    grays = [Image.fromarray(np.rint(255.0 * np.clip(ch, 0.0, 1.0)).astype(np.uint8), mode="L")
             for ch in attention]
    overlay = Image.fromarray(PALETTE[attention.argmax(axis=0) % len(PALETTE)], mode="RGB")
    return grays, overlay


def cmd_visualize_attention(args) -> int:
    model, cfg, data_cfg = load_model(args.checkpoint)
    splits, _ = _load_data(args.data, data_cfg)
    split, index = parse_sample_id(args.sample)
    samples = getattr(splits, split)
    if not 0 <= index < len(samples):
        raise SystemExit(f"sample index {index} out of range for split '{split}' ({len(samples)} samples)")
    sample = samples[index]
    with torch.no_grad():
        att = model.attend(model.encoder(torch.from_numpy(sample.image[None])))[0].numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grays, overlay = attention_images(att)
    for c, img in enumerate(grays):
        img.save(out / f"channel_{c}.png")
    overlay.save(out / "argmax.png")
    Image.fromarray(np.rint(255 * sample.image.transpose(1, 2, 0)).astype(np.uint8)).save(out / "input.png")
    print(f"wrote {len(grays) + 2} images to {out}")
    return 0


def cmd_ablate(args) -> int:
    file_data_cfg, cfg = load_config(args.config)
    splits, data_cfg = _load_data(args.data, file_data_cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(cfg, splits, variants, seeds, data_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partreid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render the synthetic dataset to a directory")
    g.add_argument("--config", help="JSON config; only dataset keys are used")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset directory; generated from the config when omitted")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the query/gallery splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--report", required=True)
    e.add_argument("--threshold", type=float, help="visibility threshold (default: from checkpoint)")
    e.add_argument("--dump-distances", help="save the query x gallery distance matrix as .npy")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize-attention", help="write attention maps of one sample as PNGs")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--sample", required=True, help="split:index, e.g. query:0 (bare index = query)")
    v.add_argument("--data")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize_attention)

    a = sub.add_parser("ablate", help="train ablation variants and sweeps")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", required=True, help="comma list from: " + ", ".join(VARIANTS))
    a.add_argument("--seeds", default="0")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
