"""Joint episodic + pseudo-mask training with parameter EMA and an online
global background prototype."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import core
from .core import IGNORE_LABEL, DataError, draw_episode, _check_class_counts
from .encoder import (
    AuxHead,
    EncoderConfig,
    build_encoder,
    encode,
    save_checkpoint,
)
from .miner import downsample_mask, load_manifest, load_pseudo_mask
from .protomath import masked_average_pool, score_map, episodic_loss, Prototype

logger = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 2000
    total_steps: int = 6000
    pairs_per_batch: int = 4
    pseudo_per_batch: int = 32
    balance_lambda: float = 1.0
    sigma: float = 20.0
    param_ema_decay: float = 0.999
    bg_proto_momentum: float = 0.999
    bg_fuse_weight: float = 0.9
    crop: int = 473
    shots: int = 1
    seed: int = 0
    feature_channels: int = 16
    clusters: int = 5

    def __post_init__(self):
        if min(self.lr, self.momentum, self.lr_decay_factor) <= 0:
            raise TrainError("rates must be positive")
        if self.pseudo_per_batch < 0:
            raise TrainError("pseudo_per_batch must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_file(cls, path, **overrides):
        """Parse a `key = value` text config; overrides win."""
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = type(f.default)(values[f.name])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


def lr_schedule(step, config: TrainConfig) -> float:
    if step < 0:
        raise TrainError("step must be >= 0")
    return config.lr * (1.0 / config.lr_decay_factor) ** (step // config.lr_decay_every)


def update_param_ema(shadow_module, live_module, decay):
    """shadow <- decay*shadow + (1-decay)*params; buffers are copied straight over."""
    if not 0 < decay < 1:
        raise TrainError("ema decay must be in (0, 1)")
    with torch.no_grad():
        for ps, pl in zip(shadow_module.parameters(), live_module.parameters()):
            if ps.shape != pl.shape:
                raise TrainError("ema shadow shape mismatch (corrupt checkpoint?)")
            ps.mul_(decay).add_((1.0 - decay) * pl)
        for bs, bl in zip(shadow_module.buffers(), live_module.buffers()):
            bs.copy_(bl)


def update_global_bg(global_bg, current_bg, m):
    """EMA of background prototypes; the first-ever update initializes to current."""
    if not 0 < m < 1:
        raise TrainError("momentum must be in (0, 1)")
    current = current_bg.vector if isinstance(current_bg, Prototype) else current_bg
    if not torch.isfinite(current).all():
        raise TrainError("non-finite background prototype")
    if global_bg is None:
        return current.detach().clone()
    return m * global_bg + (1.0 - m) * current.detach()


# --- augmentation ---------------------------------------------------------

def random_flip_crop(pixels, masks, crop, rng):
    """Joint horizontal flip + random crop; ignore pixels stay ignore."""
    if rng.random() < 0.5:
        pixels = pixels[:, ::-1].copy()
        masks = [m[:, ::-1].copy() for m in masks]
    h, w = pixels.shape[:2]
    ch, cw = min(crop, h), min(crop, w)
    top = rng.integers(h - ch + 1)
    left = rng.integers(w - cw + 1)
    pixels = pixels[top : top + ch, left : left + cw]
    masks = [m[top : top + ch, left : left + cw] for m in masks]
    return pixels, masks


def color_jitter(pixels, rng, strength=0.3):
    """Brightness/contrast jitter for the pseudo branch."""
    x = pixels.astype(np.float32)
    x = x * (1.0 + strength * (rng.random() - 0.5) * 2)
    x = x + 255.0 * strength * (rng.random() - 0.5)
    return np.clip(x, 0, 255).astype(np.uint8)


# --- training step --------------------------------------------------------

class TrainState:
    def __init__(self, encoder, aux_head, optimizer, config):
        self.encoder = encoder
        self.aux_head = aux_head
        self.ema_encoder = copy.deepcopy(encoder)
        self.ema_encoder.eval()
        self.ema_aux = copy.deepcopy(aux_head) if aux_head is not None else None
        for p in self.ema_encoder.parameters():
            p.requires_grad_(False)
        if self.ema_aux is not None:
            for p in self.ema_aux.parameters():
                p.requires_grad_(False)
        self.optimizer = optimizer
        self.config = config
        self.global_bg = None
        self.step = 0


def _episode_loss(state, episode, config):
    """Support MAP prototypes -> score map on the query -> cross-entropy."""
    fg_feats, fg_masks = [], []
    bg_feats, bg_masks = [], []
    for sample, bmask in episode.support:
        feat = encode(state.encoder, sample.pixels, source_id=sample.id)
        small = downsample_mask(bmask, feat.stride, feat.values.shape[-2:])
        fg_feats.append(feat.values)
        fg_masks.append(small)
        bg_feats.append(feat.values)
        bg_masks.append(small)
    # union-MAP over all shots' pixels
    cat_feat = torch.cat([f.reshape(f.shape[0], -1) for f in fg_feats], dim=1)
    cat_mask = np.concatenate([m.reshape(-1) for m in fg_masks])
    if not (np.any(cat_mask == 1) and np.any(cat_mask == 0)):
        return None  # support degenerate at feature resolution; caller skips it
    fg = masked_average_pool(cat_feat[:, None, :], cat_mask[None, :], 1, origin="support_fg")
    bg = masked_average_pool(cat_feat[:, None, :], cat_mask[None, :], 0, origin="support_bg")

    if state.global_bg is not None:
        w = config.bg_fuse_weight
        bg_vec = w * state.global_bg + (1.0 - w) * bg.vector
        bg = Prototype(vector=bg_vec, class_id=0, origin="support_bg")

    qsample, qmask = episode.query
    qfeat = encode(state.encoder, qsample.pixels, source_id=qsample.id)
    qsmall = downsample_mask(qmask, qfeat.stride, qfeat.values.shape[-2:])
    score = score_map(qfeat, [bg, fg], sigma=config.sigma)
    return episodic_loss(score, qsmall)


def _support_bg_current(state, episode):
    """Raw (unfused) support background prototype, for the global EMA update.

    Computed with the EMA encoder in eval mode: the global prototype is
    consumed next to EMA-encoder features at evaluation, so it must live in
    that feature space (train-mode batch statistics would shift it)."""
    sample, bmask = episode.support[0]
    with torch.no_grad():
        feat = encode(state.ema_encoder, sample.pixels, source_id=sample.id)
        small = downsample_mask(bmask, feat.stride, feat.values.shape[-2:])
        if not np.any(small == 0):
            return None
        return masked_average_pool(feat, small, 0, origin="support_bg").vector


def train_step(state: TrainState, episode_batch, pseudo_batch, config: TrainConfig):
    """One joint optimization step; returns metrics for the log."""
    state.encoder.train()
    losses = [_episode_loss(state, ep, config) for ep in episode_batch]
    losses = [l for l in losses if l is not None]
    if not losses:
        raise TrainError("every episode in the batch was degenerate at feature resolution")
    l_gt = torch.stack(losses).mean()

    if pseudo_batch and config.pseudo_per_batch > 0:
        if state.aux_head is None:
            raise TrainError("pseudo batch given but no auxiliary head configured")
        state.aux_head.train()
        dtype = next(state.encoder.parameters()).dtype
        from .encoder import normalize_image

        imgs = torch.stack([normalize_image(px, dtype=dtype) for px, _ in pseudo_batch])
        feats = state.encoder(imgs)
        logits = state.aux_head(feats)
        stride = state.encoder.config.output_stride
        targets = torch.stack(
            [
                torch.from_numpy(
                    downsample_mask(pm, stride, logits.shape[-2:]).astype(np.int64)
                )
                for _, pm in pseudo_batch
            ]
        )
        l_pseudo = F.cross_entropy(logits, targets)
    else:
        l_pseudo = torch.zeros((), dtype=l_gt.dtype)

    total = l_gt + config.balance_lambda * l_pseudo
    if not torch.isfinite(total):
        raise TrainError(
            f"non-finite loss at step {state.step}: "
            f"l_gt={float(l_gt)}, l_pseudo={float(l_pseudo)}"
        )

    lr = lr_schedule(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()

    update_param_ema(state.ema_encoder, state.encoder, config.param_ema_decay)
    if state.ema_aux is not None and state.aux_head is not None:
        update_param_ema(state.ema_aux, state.aux_head, config.param_ema_decay)

    bg_vecs = [v for v in (_support_bg_current(state, ep) for ep in episode_batch) if v is not None]
    if bg_vecs:
        current = torch.stack(bg_vecs).mean(dim=0)
        state.global_bg = update_global_bg(state.global_bg, current, config.bg_proto_momentum)

    state.step += 1
    return {
        "step": state.step,
        "lr": lr,
        "l_gt": l_gt.detach().item(),
        "l_pseudo": l_pseudo.detach().item(),
        "total": total.detach().item(),
    }


def run_training(dataset, pseudo_dir, fold, config: TrainConfig, out_path,
                 encoder_config: EncoderConfig | None = None, log_path=None):
    """Run config.total_steps of joint training and write a checkpoint.

    `pseudo_dir` may be None (or pseudo_per_batch 0) to disable the mining branch."""
    core.configure_determinism()
    torch.manual_seed(config.seed)
    encoder_config = encoder_config or EncoderConfig(feature_channels=config.feature_channels)
    encoder = build_encoder(encoder_config)

    use_pseudo = pseudo_dir is not None and config.pseudo_per_batch > 0
    aux_head = None
    pseudo_items = []
    if use_pseudo:
        manifest = load_manifest(pseudo_dir)
        aux_head = AuxHead(encoder_config.feature_channels, manifest["k"] + 1)
        for entry in manifest["entries"]:
            sid = entry["id"]
            if sid in dataset.samples:
                px = dataset.samples[sid].pixels
            else:
                continue
            pseudo_items.append((sid, px, load_pseudo_mask(pseudo_dir, sid)))
        if not pseudo_items:
            raise TrainError("pseudo manifest has no usable entries")

    params = list(encoder.parameters()) + (
        list(aux_head.parameters()) if aux_head is not None else []
    )
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    state = TrainState(encoder, aux_head, optimizer, config)

    train_classes = list(fold.train_classes)
    _check_class_counts(dataset, train_classes, config.shots)
    rng = np.random.default_rng(config.seed)
    test_set = set(fold.test_classes)

    log_lines = []
    for _ in range(config.total_steps):
        episodes = []
        for _ in range(config.pairs_per_batch):
            ep = draw_episode(dataset, train_classes, config.shots, rng)
            if ep.class_id in test_set:
                raise DataError(f"fold leakage: episode class {ep.class_id} is a test class")
            episodes.append(_augment_episode(ep, config, rng))
        pseudo_batch = []
        if use_pseudo:
            for i in rng.integers(len(pseudo_items), size=config.pseudo_per_batch):
                sid, px, pm = pseudo_items[int(i)]
                px2 = color_jitter(px, rng)
                px2, (pm2,) = random_flip_crop(px2, [pm], config.crop, rng)
                pseudo_batch.append((px2, pm2))
        metrics = train_step(state, episodes, pseudo_batch, config)
        log_lines.append(
            "step={step} lr={lr:.6g} l_gt={l_gt:.6f} l_pseudo={l_pseudo:.6f} "
            "total={total:.6f}".format(**metrics)
        )

    if log_path:
        Path(log_path).write_text("\n".join(log_lines) + "\n")
    save_checkpoint(
        out_path,
        config=config.to_dict(),
        encoder_config=encoder_config,
        encoder=state.encoder,
        aux_head=state.aux_head,
        ema_encoder=state.ema_encoder,
        ema_aux=state.ema_aux,
        global_bg=None if state.global_bg is None else state.global_bg.numpy(),
        step=state.step,
    )
    return out_path


def _augment_episode(episode, config, rng):
    from .core import Episode, ImageSample

    def aug(sample, bmask):
        px, (bm, full) = random_flip_crop(sample.pixels, [bmask, sample.mask], config.crop, rng)
        return ImageSample(id=sample.id, pixels=px, mask=full), bm

    def has_both_on_grid(bm):
        # the loss sees the mask on the stride-4 grid; keep fg and bg alive there
        grid = bm[:: 4, :: 4]
        return np.any(grid == 1) and np.any(grid == 0)

    support = []
    for sample, bmask in episode.support:
        s, bm = aug(sample, bmask)
        if not has_both_on_grid(bm):  # crop starved a region: keep the original
            s, bm = sample, bmask
        support.append((s, bm))
    qs, qm = episode.query
    q, qb = aug(qs, qm)
    if not np.any(qb != IGNORE_LABEL):
        q, qb = qs, qm
    return Episode(support=support, query=(q, qb), class_id=episode.class_id,
                   shots=episode.shots)
