"""Training loop, schedule, augmentation, checkpoints and the ablation harness."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .attention import part_attention_loss
from .config import TrainConfig, config_to_dict, split_config
from .evaluation import evaluate
from .losses import TripletConfig, global_triplet_loss, id_loss, part_triplet_loss, total_loss
from .model import PartReIDNet
from .synthetic import DataConfig, DatasetSplits, identity_balanced_batches, splits_checksum, stack_split

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MU_GRID = (0.15, 0.35, 0.55, 0.75, 0.95)
GAMMA_GRID = (0.15, 0.35, 0.55, 0.75, 0.95)
VARIANTS = ("full", "no_part_attention", "no_focuser", "no_pixel_predictor", "plain_triplet",
            "mu_sweep", "gamma_sweep")
_VARIANT_OVERRIDES = {
    "full": {},
    "no_part_attention": {"gamma_part": 0.0, "use_part_attention": False},
    "no_focuser": {"use_focuser": False},
    "no_pixel_predictor": {"single_stage_predictor": True},
    "plain_triplet": {"triplet_mode": "global"},
}
_STREAM_BATCHES = 0
_STREAM_ERASING = 1
_STREAM_CROP = 2


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup reaching ``base_lr`` on the last warmup epoch, then two step decays."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        frac = epoch / (cfg.warmup_epochs - 1)
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    d1, d2 = cfg.decay_epochs
    if epoch < d1:
        return cfg.base_lr
    if epoch < d2:
        return cfg.decay_lrs[0]
    return cfg.decay_lrs[1]


def erasing_box(shape, rng: np.random.Generator, area_range=(0.02, 0.4), aspect_range=(0.3, 3.3),
                attempts: int = 100):
    """Pick a ``(top, left, height, width)`` box inside an ``(H, W)`` grid, or ``None``."""
    h, w = shape
    for _ in range(attempts):
        area = rng.uniform(*area_range) * h * w
        aspect = rng.uniform(*aspect_range)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            return int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)), eh, ew
    return None


def random_erasing(image: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``prob`` overwrite one random rectangle of a ``(C, H, W)`` image with uniform noise.

    Returns a new array; the input is never modified. Parsing labels are
    deliberately left alone by callers.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    out = np.array(image, copy=True)
    if rng.random() >= prob:
        return out
    box = erasing_box(out.shape[-2:], rng)
    if box is not None:
        t, l, eh, ew = box
        out[..., t:t + eh, l:l + ew] = rng.uniform(0.0, 1.0, size=out[..., t:t + eh, l:l + ew].shape)
    return out


def pad_crop(image: np.ndarray, labels: np.ndarray, pad: int, rng: np.random.Generator):
    """Zero-pad by ``pad`` pixels and crop back at a random offset; labels follow on their own grid.

    Offsets are whole multiples of the image/label stride so both stay aligned;
    uncovered label cells become background. Returns new arrays.
    """
    stride = image.shape[-2] // labels.shape[-2]
    if pad % stride:
        raise ValueError(f"pad {pad} must be a multiple of the label stride {stride}")
    cells = pad // stride
    if cells == 0:
        return np.array(image, copy=True), np.array(labels, copy=True)
    dy, dx = (int(v) for v in rng.integers(-cells, cells + 1, size=2))
    return _shift(image, dy * stride, dx * stride), _shift(labels, dy, dx)


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    out[..., max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        a[..., max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def build_model(cfg: TrainConfig, num_identities: int) -> PartReIDNet:
    return PartReIDNet(num_identities, num_parts=cfg.num_parts, feat_channels=cfg.feat_channels,
                       mid_channels=cfg.mid_channels, embed_dim=cfg.embed_dim, gate_kernel=cfg.gate_kernel,
                       encoder_widths=cfg.encoder_widths, use_part_attention=cfg.use_part_attention,
                       use_focuser=cfg.use_focuser, single_stage_predictor=cfg.single_stage_predictor)


def compute_losses(model: PartReIDNet, images: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor,
                   cfg: TrainConfig) -> dict:
    out = model(images, cfg.visibility_threshold)
    l_part = part_attention_loss(out.attention, labels, cfg.smoothing)
    if cfg.triplet_mode == "part":
        l_tri = part_triplet_loss(out.parts, targets, TripletConfig(cfg.margin, cfg.num_parts), cfg.mining)
    else:
        l_tri = global_triplet_loss(out.foreground, targets, cfg.margin)
    # part heads only see parts that are actually in view (ground-truth labels)
    present = torch.stack([(labels == x).flatten(1).any(dim=1) for x in range(1, cfg.num_parts + 1)], dim=1)
    l_id = id_loss(out.foreground_logits, targets, out.part_logits, present, cfg.smoothing)
    return {"triplet": l_tri, "id": l_id, "part": l_part,
            "total": total_loss(l_tri, l_id, l_part, cfg.gamma_part)}


class Trainer:
    """Owns the model, optimiser and epoch counter for one training run.

    Batch order and augmentation noise for epoch ``e`` come from generators
    keyed on ``(seed, e)``, so resuming from a checkpoint replays exactly the
    same stream as an uninterrupted run.
    """

    def __init__(self, cfg: TrainConfig, splits: DatasetSplits, data_cfg: Optional[DataConfig] = None):
        self.cfg = cfg
        self.data_cfg = data_cfg
        self.train_arrays = stack_split(splits.train)
        self.query_arrays = stack_split(splits.query) if splits.query else None
        self.gallery_arrays = stack_split(splits.gallery) if splits.gallery else None
        ids = self.train_arrays["identities"]
        self.label_ids, self.targets = np.unique(ids, return_inverse=True)
        torch.manual_seed(cfg.seed)
        self.model = build_model(cfg, len(self.label_ids))
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.warmup_start_lr,
                                          betas=cfg.adam_betas, eps=cfg.adam_eps,
                                          weight_decay=cfg.weight_decay)
        self.epoch = 0
        self.history: list[dict] = []

    def _epoch_rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, self.epoch, stream]))

    def run_epoch(self) -> dict:
        cfg = self.cfg
        lr = lr_schedule(self.epoch, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        batch_rng, erase_rng = self._epoch_rng(_STREAM_BATCHES), self._epoch_rng(_STREAM_ERASING)
        crop_rng = self._epoch_rng(_STREAM_CROP)
        sums = {"triplet": 0.0, "id": 0.0, "part": 0.0, "total": 0.0}
        n_batches = 0
        digest = hashlib.sha256()
        images_all, labels_all = self.train_arrays["images"], self.train_arrays["labels"]
        for b, idx in enumerate(identity_balanced_batches(self.targets, cfg.n_ids, cfg.n_per_id, batch_rng)):
            digest.update(np.asarray(idx, dtype=np.int64).tobytes())
            shifted = [pad_crop(images_all[i], labels_all[i], cfg.crop_pad, crop_rng) for i in idx]
            images = np.stack([random_erasing(im, cfg.random_erasing_prob, erase_rng) for im, _ in shifted])
            labels = np.stack([lab for _, lab in shifted])
            losses = compute_losses(self.model, torch.from_numpy(images), torch.from_numpy(labels),
                                    torch.from_numpy(self.targets[idx]), cfg)
            total = losses["total"]
            if not torch.isfinite(total):
                raise TrainingDiverged(self.epoch, b, float(total.detach()))
            self.optimizer.zero_grad()
            total.backward()
            self.optimizer.step()
            for k in sums:
                sums[k] += float(losses[k].detach())
            n_batches += 1
        row = {"epoch": self.epoch + 1, "lr": lr, "batches": n_batches, "batch_digest": digest.hexdigest()[:16]}
        row.update({f"loss_{k}": v / max(n_batches, 1) for k, v in sums.items()})
        self.epoch += 1
        if self.query_arrays is not None and (self.epoch % cfg.eval_every == 0 or self.epoch == cfg.epochs):
            report = self.evaluate()
            row.update({"rank1": report.rank_k[1], "mAP": report.mAP,
                        "attention_pixel_accuracy": report.attention_accuracy})
        self.history.append(row)
        log.info("epoch %d: %s", self.epoch, {k: float(f"{v:.4g}") if isinstance(v, float) else v for k, v in row.items()})
        return row

    def fit(self, until_epoch: Optional[int] = None, log_path=None) -> list[dict]:
        until = self.cfg.epochs if until_epoch is None else until_epoch
        while self.epoch < until:
            row = self.run_epoch()
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(row) + "\n")
        return self.history

    def evaluate(self, threshold: Optional[float] = None):
        mu = self.cfg.visibility_threshold if threshold is None else threshold
        report, _ = evaluate(self.model, self.query_arrays, self.gallery_arrays, mu)
        return report

    # -- checkpointing -----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "config": config_to_dict(self.data_cfg or DataConfig(), self.cfg),
            "has_data_config": self.data_cfg is not None,
            "label_ids": self.label_ids.tolist(),
            "history": self.history,
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.epoch = state["epoch"]
        self.history = list(state["history"])
        torch.set_rng_state(state["torch_rng"])


def read_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {state.get('format_version')}")
    return state


def checkpoint_configs(state: dict) -> tuple[Optional[DataConfig], TrainConfig]:
    data_cfg, train_cfg = split_config(state["config"])
    return (data_cfg if state.get("has_data_config") else None), train_cfg


def resume(path, splits: DatasetSplits) -> Trainer:
    state = read_checkpoint(path)
    data_cfg, cfg = checkpoint_configs(state)
    trainer = Trainer(cfg, splits, data_cfg)
    trainer.load_state_dict(state)
    return trainer


def load_model(path) -> tuple[PartReIDNet, TrainConfig, Optional[DataConfig]]:
    state = read_checkpoint(path)
    data_cfg, cfg = checkpoint_configs(state)
    model = build_model(cfg, len(state["label_ids"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, data_cfg


def train(cfg: TrainConfig, splits: DatasetSplits, data_cfg: Optional[DataConfig] = None,
          out_dir=None) -> Trainer:
    """Train from scratch. With ``out_dir`` writes ``metrics.jsonl`` and ``checkpoint.pt``."""
    trainer = Trainer(cfg, splits, data_cfg)
    log_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        log_path.write_text("")
    trainer.fit(log_path=log_path)
    if out_dir is not None:
        trainer.save(Path(out_dir) / "checkpoint.pt")
    return trainer


def config_key(cfg: TrainConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, default=list)


def ablate(cfg: TrainConfig, splits: DatasetSplits, variants: Iterable[str], seeds: Iterable[int] = (0,),
           data_cfg: Optional[DataConfig] = None, cache: Optional[dict] = None) -> list[dict]:
    """Train every requested variant on the same data and seeds; one row per (variant, setting, seed).

    The visibility threshold only acts at inference, so the mu sweep re-evaluates
    one trained full model per seed rather than retraining. Identical
    configurations are trained once and shared between rows; pass the same
    ``cache`` dict to several calls to share trained models between them too.
    """
    variants = list(variants)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants: {unknown}; choose from {VARIANTS}")
    checksum = splits_checksum(splits)
    cache = {} if cache is None else cache

    def trained(c: TrainConfig) -> Trainer:
        key = config_key(c)
        if key not in cache:
            log.info("training %s", key)
            cache[key] = train(c, splits, data_cfg)
        return cache[key]

    def row(variant, seed, report, **extra):
        r = {"variant": variant, "seed": seed, **extra, "rank1": report.rank_k[1], "rank5": report.rank_k[5],
             "mAP": report.mAP, "attention_pixel_accuracy": report.attention_accuracy,
             "data_checksum": checksum}
        return r

    rows = []
    for seed in seeds:
        base = cfg.with_overrides(seed=seed)
        for variant in variants:
            if variant == "mu_sweep":
                trainer = trained(base)
                for mu in MU_GRID:
                    rows.append(row(variant, seed, trainer.evaluate(mu), mu=mu))
            elif variant == "gamma_sweep":
                for gamma in GAMMA_GRID:
                    trainer = trained(base.with_overrides(gamma_part=gamma))
                    rows.append(row(variant, seed, trainer.evaluate(), gamma_part=gamma))
            else:
                trainer = trained(base.with_overrides(**_VARIANT_OVERRIDES[variant]))
                rows.append(row(variant, seed, trainer.evaluate()))
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<20}{'setting':<18}{'seed':>5}{'rank1':>9}{'mAP':>9}"]
    for r in rows:
        setting = f"mu={r['mu']}" if "mu" in r else f"gamma={r['gamma_part']}" if "gamma_part" in r else "-"
        lines.append(f"{r['variant']:<20}{setting:<18}{r['seed']:>5}{r['rank1']:>9.4f}{r['mAP']:>9.4f}")
    return "\n".join(lines)
