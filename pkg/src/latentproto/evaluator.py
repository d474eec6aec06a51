"""Episode-based evaluation: binary prediction with optional rectifications,
accumulated mIoU per class, and multi-seed averaging."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import core
from .core import IGNORE_LABEL, DataError, sample_episodes
from .encoder import encode, load_checkpoint, restore_encoder
from .miner import downsample_mask, upsample_labels
from .protomath import Prototype, masked_average_pool, score_map
from .rectifier import fuse_background, rectify_foreground

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    episodes: int = 1000
    seeds: tuple = (0, 1, 2, 3, 4)
    shots: int = 1
    rectify_fg: bool = False
    rectify_bg: bool = False
    use_ema_params: bool = True
    sigma: float = 20.0
    fuse_weight: float = 0.9
    beta: float = 0.2
    n_images: int = 4

    def __post_init__(self):
        if self.episodes < 1 or not self.seeds:
            raise DataError("episodes >= 1 and at least one seed required")


@dataclass
class EvalReport:
    per_class_iou: dict  # class id -> mean IoU over seeds
    per_seed_miou: list
    mean_miou: float
    std_miou: float
    episodes_per_sec: float
    parameter_count: int
    absent_classes: list = field(default_factory=list)

    def to_json(self):
        """Deterministic primary payload; throughput lives outside it."""
        payload = {
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "per_seed_miou": self.per_seed_miou,
            "mean_miou": self.mean_miou,
            "std_miou": self.std_miou,
            "parameter_count": self.parameter_count,
            "absent_classes": self.absent_classes,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self):
        lines = ["class   IoU"]
        for c, v in sorted(self.per_class_iou.items()):
            lines.append(f"{c:>5}   {v:.4f}")
        lines.append(f"mIoU over seeds: {self.mean_miou:.4f} +/- {self.std_miou:.4f}")
        lines.append(f"episodes/sec: {self.episodes_per_sec:.2f}")
        lines.append(f"parameters (inference): {self.parameter_count}")
        return "\n".join(lines)


def support_prototypes(model, episode, sigma_dtype=None):
    """Union-MAP foreground and background prototypes over all shots, plus the
    mean support image embedding (for region retrieval)."""
    feats, masks = [], []
    embeddings = []
    with torch.no_grad():
        for sample, bmask in episode.support:
            feat = encode(model, sample.pixels, source_id=sample.id)
            small = downsample_mask(bmask, feat.stride, feat.values.shape[-2:])
            if not np.any(small == 1):
                # thin foreground missed the stride grid: mark every touched cell
                small = small.copy()
                ys, xs = np.nonzero(bmask == 1)
                small[ys // feat.stride, xs // feat.stride] = 1
            feats.append(feat.values.reshape(feat.values.shape[0], -1))
            masks.append(small.reshape(-1))
            embeddings.append(feat.values.mean(dim=(1, 2)))
    cat_feat = torch.cat(feats, dim=1)[:, None, :]
    cat_mask = np.concatenate(masks)[None, :]
    fg = masked_average_pool(cat_feat, cat_mask, 1, origin="support_fg")
    bg = masked_average_pool(cat_feat, cat_mask, 0, origin="support_bg")
    embedding = torch.stack(embeddings).mean(dim=0)
    return fg, bg, embedding


def predict_episode(model, episode, global_bg=None, *, rectify_bg_on=False,
                    rectify_fg_on=False, bank=None, config: EvalConfig | None = None):
    """Binary prediction for the query at its original resolution."""
    cfg = config or EvalConfig()
    fg, bg, embedding = support_prototypes(model, episode)
    if rectify_bg_on:
        if global_bg is None:
            raise DataError("background rectification requested but no global prototype")
        bg = fuse_background(bg, global_bg, w=cfg.fuse_weight)
    if rectify_fg_on:
        if bank is None:
            raise DataError("foreground rectification requested but no region bank")
        fg, _ = rectify_foreground(fg, embedding, bank, n_images=cfg.n_images, beta=cfg.beta)
    qsample, _ = episode.query
    with torch.no_grad():
        qfeat = encode(model, qsample.pixels, source_id=qsample.id)
        score = score_map(qfeat, [bg, fg], sigma=cfg.sigma)
        labels = score.probs.argmax(dim=0).cpu().numpy().astype(np.uint8)
    return upsample_labels(labels, qfeat.stride, qsample.pixels.shape[:2])


def accumulate_iou(pred, gt, inters, unions, class_id):
    """Foreground intersection/union for one episode; ignore pixels excluded."""
    valid = gt != IGNORE_LABEL
    p = (pred == 1) & valid
    g = (gt == 1) & valid
    inters[class_id] = inters.get(class_id, 0) + int(np.count_nonzero(p & g))
    unions[class_id] = unions.get(class_id, 0) + int(np.count_nonzero(p | g))


def miou(inters, unions, class_list):
    """Per-class accumulated IoU and their unweighted mean; never-sampled
    classes are excluded from the mean with a warning."""
    per_class, absent = {}, []
    for c in class_list:
        if unions.get(c, 0) > 0:
            per_class[c] = inters.get(c, 0) / unions[c]
        elif c in unions:  # sampled but union 0: perfect empty prediction
            per_class[c] = 1.0
        else:
            absent.append(c)
            logger.warning("class %s never sampled; excluded from mIoU", c)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean, absent


def run_eval(checkpoint_path, dataset, fold, config: EvalConfig, bank=None) -> EvalReport:
    core.configure_determinism()
    payload = load_checkpoint(checkpoint_path)
    model = restore_encoder(payload, use_ema=config.use_ema_params)
    global_bg = payload["global_bg"]
    if config.rectify_fg and bank is None:
        raise DataError("rectify_fg requires a region bank")
    if config.rectify_bg and global_bg is None:
        raise DataError("rectify_bg requires a trained global background prototype")

    classes = list(fold.test_classes)
    per_seed_class, per_seed_miou = [], []
    absent_all = set()
    n_pred, t_pred = 0, 0.0
    for seed in config.seeds:
        episodes = sample_episodes(
            dataset, fold, config.shots, config.episodes, seed, use_test_classes=True
        )
        inters, unions = {}, {}
        for ep in episodes:
            t0 = time.perf_counter()
            pred = predict_episode(
                model, ep, global_bg,
                rectify_bg_on=config.rectify_bg, rectify_fg_on=config.rectify_fg,
                bank=bank, config=config,
            )
            t_pred += time.perf_counter() - t0
            n_pred += 1
            accumulate_iou(pred, ep.query[1], inters, unions, ep.class_id)
        per_class, mean, absent = miou(inters, unions, classes)
        per_seed_class.append(per_class)
        per_seed_miou.append(mean)
        absent_all.update(absent)

    per_class_mean = {}
    for c in classes:
        vals = [pc[c] for pc in per_seed_class if c in pc]
        if vals:
            per_class_mean[c] = float(np.mean(vals))
    params = sum(p.numel() for p in model.parameters())
    return EvalReport(
        per_class_iou=per_class_mean,
        per_seed_miou=[float(v) for v in per_seed_miou],
        mean_miou=float(np.mean(per_seed_miou)),
        std_miou=float(np.std(per_seed_miou)),
        episodes_per_sec=(n_pred / t_pred) if t_pred > 0 else 0.0,
        parameter_count=int(params),
        absent_classes=sorted(absent_all),
    )


# --- visualization --------------------------------------------------------

_PALETTE = np.array(
    [
        [0, 0, 0], [230, 60, 60], [60, 180, 75], [60, 100, 230], [240, 200, 50],
        [170, 60, 220], [70, 210, 210], [240, 130, 40], [150, 150, 150],
        [130, 220, 90], [220, 90, 160], [90, 130, 60], [60, 60, 140],
        [200, 200, 120], [120, 60, 60], [60, 200, 140],
    ],
    dtype=np.uint8,
)


def colorize_labels(labels, k=None):
    pal = _PALETTE
    if k is not None and k + 1 > len(pal):
        reps = int(np.ceil((k + 1) / len(pal)))
        pal = np.tile(pal, (reps, 1))
    out = pal[np.asarray(labels) % len(pal)]
    out[np.asarray(labels) == IGNORE_LABEL] = 255
    return out


def palette_legend(k, swatch=12):
    """Horizontal strip of the pseudo-label palette, labels 0..K left to right."""
    strip = np.zeros((swatch, swatch * (k + 1), 3), dtype=np.uint8)
    for label in range(k + 1):
        strip[:, label * swatch : (label + 1) * swatch] = colorize_labels(
            np.full((1, 1), label), k
        )[0, 0]
    return strip


def render_panel(episode, pred):
    """Side-by-side support | query | ground truth | prediction image."""
    def mask_rgb(m):
        return colorize_labels(np.where(m == IGNORE_LABEL, IGNORE_LABEL, m), 1)

    support_img, support_mask = episode.support[0]
    q, gt = episode.query
    tiles = [
        support_img.pixels, mask_rgb(support_mask), q.pixels, mask_rgb(gt), mask_rgb(pred),
    ]
    h = max(t.shape[0] for t in tiles)
    padded = []
    for t in tiles:
        canvas = np.zeros((h, t.shape[1], 3), dtype=np.uint8)
        canvas[: t.shape[0]] = t
        padded.append(canvas)
    gap = np.full((h, 4, 3), 255, dtype=np.uint8)
    row = padded[0]
    for t in padded[1:]:
        row = np.concatenate([row, gap, t], axis=1)
    return row
