"""Procedural occluded-pedestrian generator with exact ground truth.

Every sample is a pure function of ``(global_seed, identity_id, pose_seed,
occlusion, camera_id)``. Parts are drawn as axis-aligned boxes at canonical
positions with per-pose jitter, so the renderer knows exactly which pixel
belongs to which part and which pixels the occluder hides.

Part indices (1-based; 0 is background)::

    1 head, 2 left arm, 3 right arm, 4 torso, 5 left leg, 6 right leg
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

NUM_PARTS = 6
PART_NAMES = ("head", "left_arm", "right_arm", "torso", "left_leg", "right_leg")
LEG_PARTS = (5, 6)
MAX_COVERAGE = 0.95
FORMAT_VERSION = 1

# Canonical part boxes (top, bottom, left, right) on a 64x32 canvas; scaled for
# other canvas sizes. Drawing order matters: later parts paint over earlier.
_CANONICAL_BOXES = {
    4: (14, 37, 10, 22),  # torso
    2: (15, 35, 5, 10),  # left arm
    3: (15, 35, 22, 27),  # right arm
    5: (37, 61, 10, 16),  # left leg
    6: (37, 61, 16, 22),  # right leg
    1: (3, 14, 12, 20),  # head
}
_DRAW_ORDER = (4, 2, 3, 5, 6, 1)
_CANONICAL_SIZE = (64, 32)

# Fixed stream tags so unrelated draws never share a generator.
_TAG_IDENTITY = 11
_TAG_POSE = 13
_TAG_OCCLUDER = 17
_TAG_CAMERA = 19
_TAG_SPLITS = 23
_DISTRACTOR_BASE_ID = 1_000_000


class OcclusionKind(str, Enum):
    NONE = "none"
    RECTANGLE = "rectangle"
    BOTTOM_CROP = "bottom_crop"
    INTER_PERSON = "inter_person"


@dataclass(frozen=True)
class OcclusionSpec:
    kind: OcclusionKind = OcclusionKind.NONE
    coverage: float = 0.0
    placement_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", OcclusionKind(self.kind))
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must lie in [0, 1], got {self.coverage}")
        if (self.coverage == 0.0) != (self.kind is OcclusionKind.NONE):
            raise ValueError("coverage is 0 exactly when kind is 'none'")


@dataclass(frozen=True)
class IdentityAppearance:
    """Per-identity clothing and body shape.

    ``part_palette`` has one row per part: ``(r, g, b, stripe_amplitude,
    stripe_period, stripe_phase)``. ``body_geometry`` has one row per part:
    ``(dy_top, dy_bottom, dx_left, dx_right)`` offsets in canonical pixels
    added to the canonical box.
    """

    identity_id: int
    part_palette: np.ndarray
    body_geometry: np.ndarray

    @property
    def num_parts(self) -> int:
        return self.part_palette.shape[0]


@dataclass
class Sample:
    image: np.ndarray  # (3, H_img, W_img) float32 in [0, 1]
    identity: int
    parsing_label: np.ndarray  # (H, W) int64 at feature-map resolution
    camera_id: int
    occlusion: OcclusionSpec = field(default_factory=OcclusionSpec)


@dataclass
class DatasetSplits:
    train: list
    query: list
    gallery: list


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_train_ids: int = 20
    n_eval_ids: int = 10
    samples_per_id: int = 8
    query_per_id: int = 2
    occlusion_rate: float = 1.0
    train_occlusion_rate: float = 0.5
    gallery_occlusion_rate: float = 0.1
    min_coverage: float = 0.3
    max_coverage: float = 0.5
    n_cameras: int = 4
    image_height: int = 64
    image_width: int = 32
    feature_stride: int = 4
    num_parts: int = NUM_PARTS

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.image_height // self.feature_stride, self.image_width // self.feature_stride


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def generate_identity(global_seed: int, identity_id: int, num_parts: int = NUM_PARTS) -> IdentityAppearance:
    if identity_id < 0:
        raise ValueError("identity_id must be non-negative")
    if num_parts != NUM_PARTS:
        raise ValueError(f"the renderer defines exactly {NUM_PARTS} parts")
    rng = _rng(global_seed, _TAG_IDENTITY, identity_id)
    palette = np.empty((num_parts, 6))
    palette[:, 0:3] = rng.uniform(0.05, 0.95, size=(num_parts, 3))
    palette[:, 3] = rng.uniform(0.0, 0.35, size=num_parts)
    palette[:, 4] = rng.uniform(3.0, 8.0, size=num_parts)
    palette[:, 5] = rng.uniform(0.0, 2 * np.pi, size=num_parts)
    geometry = rng.integers(-1, 2, size=(num_parts, 4)).astype(float)
    return IdentityAppearance(identity_id, palette, geometry)


def part_boxes(app: IdentityAppearance, pose_seed: int, image_size: tuple[int, int] = (64, 32)) -> dict:
    """Pixel boxes ``{part: (top, bottom, left, right)}`` for one pose.

    Bounds are half-open and clipped to the canvas.
    """
    h_img, w_img = image_size
    sy, sx = h_img / _CANONICAL_SIZE[0], w_img / _CANONICAL_SIZE[1]
    rng = _rng(app.identity_id, _TAG_POSE, pose_seed)
    shift_y, shift_x = rng.integers(-2, 3, size=2)
    swing = rng.integers(-2, 3, size=(NUM_PARTS, 2))
    boxes = {}
    for part, (t, b, l, r) in _CANONICAL_BOXES.items():
        g = app.body_geometry[part - 1]
        dy = swing[part - 1, 0] if part in (2, 3, 5, 6) else 0
        dx = swing[part - 1, 1] // 2 if part in (2, 3) else 0
        top = (t + g[0] + dy + shift_y) * sy
        bottom = (b + g[1] + dy + shift_y) * sy
        left = (l + g[2] + dx + shift_x) * sx
        right = (r + g[3] + dx + shift_x) * sx
        top, bottom = int(np.clip(round(top), 0, h_img)), int(np.clip(round(bottom), 0, h_img))
        left, right = int(np.clip(round(left), 0, w_img)), int(np.clip(round(right), 0, w_img))
        boxes[part] = (top, max(bottom, top + 1), left, max(right, left + 1))
    return boxes


def _paint_body(canvas: np.ndarray, labels: np.ndarray, app: IdentityAppearance, boxes: dict) -> None:
    rows = np.arange(canvas.shape[1], dtype=float)[:, None]
    for part in _DRAW_ORDER:
        t, b, l, r = boxes[part]
        rgb, amp, period, phase = app.part_palette[part - 1, :3], *app.part_palette[part - 1, 3:]
        stripe = 1.0 + amp * np.sin(2 * np.pi * rows[t:b] / period + phase)
        canvas[:, t:b, l:r] = np.clip(rgb[:, None, None] * stripe[None], 0.0, 1.0)
        labels[t:b, l:r] = part


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.2, 0.8, size=(3, h // 8 + 2, w // 8 + 2))
    ys = np.linspace(0, coarse.shape[1] - 1.001, h)
    xs = np.linspace(0, coarse.shape[2] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    bg = (c[:, y0][:, :, x0] * (1 - fy) * (1 - fx) + c[:, y0 + 1][:, :, x0] * fy * (1 - fx)
          + c[:, y0][:, :, x0 + 1] * (1 - fy) * fx + c[:, y0 + 1][:, :, x0 + 1] * fy * fx)
    # clutter blobs that share colour statistics with clothing
    for _ in range(rng.integers(1, 4)):
        bh, bw = rng.integers(4, h // 3), rng.integers(3, w // 2)
        top, left = rng.integers(0, h - bh), rng.integers(0, w - bw)
        bg[:, top:top + bh, left:left + bw] = rng.uniform(0.05, 0.95, size=(3, 1, 1))
    return bg


def _occluder_mask(occ: OcclusionSpec, rng: np.random.Generator, body: np.ndarray, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if occ.kind is OcclusionKind.BOTTOM_CROP:
        mask[h - int(round(occ.coverage * h)):] = True
    elif occ.kind is OcclusionKind.RECTANGLE:
        area = occ.coverage * h * w
        aspect = rng.uniform(0.5, 2.0)
        oh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        ow = int(np.clip(round(area / oh), 1, w))
        oh = int(np.clip(round(area / ow), 1, h))
        rows, cols = np.nonzero(body)
        cy, cx = rng.choice(rows), rng.choice(cols)
        top = int(np.clip(cy - oh // 2, 0, h - oh))
        left = int(np.clip(cx - ow // 2, 0, w - ow))
        mask[top:top + oh, left:left + ow] = True
    return mask


def render_full(app: IdentityAppearance, pose_seed: int, occ: OcclusionSpec, camera_id: int,
                image_size: tuple[int, int] = (64, 32), global_seed: int = 0):
    """Render at image resolution.

    Returns ``(image, labels, occluder)`` where ``labels`` is the full-resolution
    parsing map (occluded pixels already zeroed) and ``occluder`` is the boolean
    mask of pixels hidden by the occluder.
    """
    if occ.coverage > MAX_COVERAGE:
        raise ValueError(f"coverage {occ.coverage} > {MAX_COVERAGE}: subject would be hidden entirely")
    h, w = image_size
    pose_rng = _rng(app.identity_id, _TAG_POSE, pose_seed, 1)
    image = _background(pose_rng, h, w)
    labels = np.zeros((h, w), dtype=np.int64)
    _paint_body(image, labels, app, part_boxes(app, pose_seed, image_size))

    occ_rng = _rng(occ.placement_seed, _TAG_OCCLUDER)
    if occ.kind is OcclusionKind.INTER_PERSON:
        other = generate_identity(global_seed, _DISTRACTOR_BASE_ID + int(occ_rng.integers(0, 2**31)))
        other_img = np.zeros_like(image)
        other_labels = np.zeros_like(labels)
        _paint_body(other_img, other_labels, other, part_boxes(other, int(occ_rng.integers(0, 2**31)), image_size))
        # slide the distractor in from one side so it overlaps `coverage` of the width
        shift = int(round((1.0 - occ.coverage) * w)) * (1 if occ_rng.random() < 0.5 else -1)
        other_img = np.roll(other_img, shift, axis=2)
        other_labels = np.roll(other_labels, shift, axis=1)
        if shift > 0:
            other_labels[:, :shift] = 0
        elif shift < 0:
            other_labels[:, shift:] = 0
        occluder = other_labels > 0
        image[:, occluder] = other_img[:, occluder]
    else:
        occluder = _occluder_mask(occ, occ_rng, labels > 0, h, w)
        if occ.kind is OcclusionKind.RECTANGLE:
            fill = occ_rng.uniform(0.0, 1.0, size=(3, 1, 1)) * occ_rng.uniform(0.8, 1.0, size=(3, h, w))
            image[:, occluder] = fill[:, occluder]
        elif occ.kind is OcclusionKind.BOTTOM_CROP:
            filler = _background(occ_rng, h, w)
            image[:, occluder] = filler[:, occluder]
    labels[occluder] = 0

    cam_rng = _rng(camera_id, _TAG_CAMERA)
    gain = cam_rng.uniform(0.8, 1.2) * cam_rng.uniform(0.9, 1.1, size=(3, 1, 1))
    noise = _rng(app.identity_id, _TAG_POSE, pose_seed, 2).normal(0.0, 0.02, size=image.shape)
    image = np.clip(image * gain + noise, 0.0, 1.0).astype(np.float32)
    return image, labels, occluder


def downsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour downsample: sample the centre pixel of each cell."""
    off = stride // 2
    return np.ascontiguousarray(labels[off::stride, off::stride])


def render_sample(app: IdentityAppearance, pose_seed: int, occ: OcclusionSpec, camera_id: int,
                  image_size: tuple[int, int] = (64, 32), feature_stride: int = 4,
                  global_seed: int = 0) -> Sample:
    image, labels, _ = render_full(app, pose_seed, occ, camera_id, image_size, global_seed)
    return Sample(image, app.identity_id, downsample_labels(labels, feature_stride), camera_id, occ)


_OCCLUDED_KINDS = (OcclusionKind.RECTANGLE, OcclusionKind.BOTTOM_CROP, OcclusionKind.INTER_PERSON)


def _draw_occlusion(rng: np.random.Generator, rate: float, cfg: DataConfig) -> OcclusionSpec:
    if rng.random() >= rate:
        return OcclusionSpec()
    kind = _OCCLUDED_KINDS[int(rng.integers(0, len(_OCCLUDED_KINDS)))]
    coverage = float(rng.uniform(cfg.min_coverage, cfg.max_coverage))
    return OcclusionSpec(kind, coverage, int(rng.integers(0, 2**31)))


def make_splits(cfg: DataConfig) -> DatasetSplits:
    """Open-set splits: training identities never appear at evaluation time.

    Identities ``0..n_train_ids-1`` train; the next ``n_eval_ids`` are split
    per identity into ``query_per_id`` (mostly occluded) queries and the
    remaining (mostly holistic) gallery images. Cameras cycle through
    ``sample_index % n_cameras``, so each query has gallery shots from other
    cameras as long as ``samples_per_id > n_cameras >= 2``.
    """
    if cfg.n_eval_ids < 2:
        raise ValueError("n_eval_ids must be >= 2")
    if cfg.n_train_ids < 2:
        raise ValueError("n_train_ids must be >= 2")
    if not 1 <= cfg.query_per_id < cfg.samples_per_id:
        raise ValueError("need 1 <= query_per_id < samples_per_id")
    if cfg.n_cameras < 2:
        raise ValueError("need at least two cameras")
    if cfg.samples_per_id - cfg.query_per_id < 1 or cfg.samples_per_id <= cfg.query_per_id:
        raise ValueError("every query identity needs gallery samples")

    render = dict(image_size=(cfg.image_height, cfg.image_width), feature_stride=cfg.feature_stride,
                  global_seed=cfg.seed)
    train, query, gallery = [], [], []
    for identity in range(cfg.n_train_ids + cfg.n_eval_ids):
        app = generate_identity(cfg.seed, identity, cfg.num_parts)
        rng = _rng(cfg.seed, _TAG_SPLITS, identity)
        is_eval = identity >= cfg.n_train_ids
        for k in range(cfg.samples_per_id):
            cam = k % cfg.n_cameras
            if not is_eval:
                rate, bucket = cfg.train_occlusion_rate, train
            elif k < cfg.query_per_id:
                rate, bucket = cfg.occlusion_rate, query
            else:
                rate, bucket = cfg.gallery_occlusion_rate, gallery
            occ = _draw_occlusion(rng, rate, cfg)
            pose_seed = int(rng.integers(0, 2**31))
            bucket.append(render_sample(app, pose_seed, occ, cam, **render))
    return DatasetSplits(train, query, gallery)


def identity_balanced_batches(identities: Sequence[int], n_ids: int, n_per_id: int,
                              rng: np.random.Generator) -> Iterator[np.ndarray]:
    """P x K sampler: yields index arrays with ``n_ids`` identities x ``n_per_id`` samples.

    Each identity's samples are shuffled and cut into chunks of ``n_per_id``
    (topped up by resampling when short). Batches are assembled from random
    distinct identities until fewer than ``n_ids`` identities have chunks left.
    """
    if n_ids < 2 or n_per_id < 2:
        raise ValueError("identity-balanced batches need n_ids >= 2 and n_per_id >= 2")
    identities = np.asarray(identities)
    unique = np.unique(identities)
    if len(unique) < n_ids:
        raise ValueError(f"dataset has {len(unique)} identities, fewer than n_ids={n_ids}")

    chunks: dict[int, list] = {}
    for pid in unique:
        idx = rng.permutation(np.flatnonzero(identities == pid))
        if len(idx) < n_per_id:
            idx = np.concatenate([idx, rng.choice(idx, n_per_id - len(idx), replace=True)])
        usable = len(idx) - len(idx) % n_per_id
        chunks[int(pid)] = [idx[i:i + n_per_id] for i in range(0, usable, n_per_id)]

    while True:
        available = [pid for pid, c in chunks.items() if c]
        if len(available) < n_ids:
            return
        chosen = rng.choice(available, size=n_ids, replace=False)
        yield np.concatenate([chunks[int(pid)].pop(0) for pid in chosen])


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

_SPLITS = ("train", "query", "gallery")


def stack_split(samples: Sequence[Sample]) -> dict:
    return {
        "images": np.stack([s.image for s in samples]).astype(np.float32),
        "labels": np.stack([s.parsing_label for s in samples]).astype(np.int64),
        "identities": np.array([s.identity for s in samples], dtype=np.int64),
        "cameras": np.array([s.camera_id for s in samples], dtype=np.int64),
        "occ_kind": np.array([s.occlusion.kind.value for s in samples]),
        "occ_coverage": np.array([s.occlusion.coverage for s in samples], dtype=np.float64),
        "occ_seed": np.array([s.occlusion.placement_seed for s in samples], dtype=np.int64),
    }


def unstack_split(arrays: dict) -> list:
    return [
        Sample(arrays["images"][i], int(arrays["identities"][i]), arrays["labels"][i],
               int(arrays["cameras"][i]),
               OcclusionSpec(OcclusionKind(str(arrays["occ_kind"][i])), float(arrays["occ_coverage"][i]),
                             int(arrays["occ_seed"][i])))
        for i in range(len(arrays["identities"]))
    ]


def split_checksum(arrays: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def export_splits(splits: DatasetSplits, cfg: DataConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "config": asdict(cfg), "checksums": {}, "counts": {}}
    for name in _SPLITS:
        arrays = stack_split(getattr(splits, name))
        np.savez(out / f"{name}.npz", **arrays)
        manifest["checksums"][name] = split_checksum(arrays)
        manifest["counts"][name] = len(arrays["identities"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def import_splits(data_dir) -> tuple[DatasetSplits, DataConfig]:
    src = Path(data_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    parts = {}
    for name in _SPLITS:
        with np.load(src / f"{name}.npz") as z:
            arrays = {k: z[k] for k in z.files}
        if split_checksum(arrays) != manifest["checksums"][name]:
            raise ValueError(f"checksum mismatch for split '{name}'")
        parts[name] = unstack_split(arrays)
    return DatasetSplits(**parts), DataConfig(**manifest["config"])


def splits_checksum(splits: DatasetSplits) -> str:
    h = hashlib.sha256()
    for name in _SPLITS:
        h.update(split_checksum(stack_split(getattr(splits, name))).encode())
    return h.hexdigest()
