"""Inference-time prototype rectification: background fusion with the global
EMA prototype, and foreground mixing with relevant pseudo-labeled regions."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import encode
from .miner import downsample_mask, load_manifest, load_pseudo_mask
from .protomath import Prototype, cosine, masked_average_pool

logger = logging.getLogger(__name__)

DEFAULT_FUSE_WEIGHT = 0.9
DEFAULT_BETA = 0.2
DEFAULT_TOP_IMAGES = 4
MIN_REGION_PIXELS = 10  # feature-resolution pixels; smaller regions are noise
MU_CLAMP = 1e-6


class RectifierError(RuntimeError):
    pass


@dataclass
class BankImage:
    image_id: str
    embedding: np.ndarray  # C, global average of features
    regions: list  # list of (label, C-vector)


@dataclass
class RegionBank:
    images: list  # list of BankImage

    def __len__(self):
        return len(self.images)


def fuse_background(current_bg: Prototype, global_bg, w=DEFAULT_FUSE_WEIGHT) -> Prototype:
    """w * global + (1-w) * current."""
    if not 0 <= w <= 1:
        raise RectifierError("fusion weight must be in [0, 1]")
    g = global_bg.vector if isinstance(global_bg, Prototype) else global_bg
    if not torch.is_tensor(g):
        g = torch.from_numpy(np.asarray(g)).to(current_bg.vector.dtype)
    vec = w * g + (1.0 - w) * current_bg.vector
    return Prototype(vector=vec, class_id=current_bg.class_id, origin="support_bg")


def build_region_bank(dataset, fold, pseudo_dir, model) -> RegionBank:
    """One entry per training-fold image: a global image embedding plus the
    pseudo-labeled region prototypes (label 0 excluded, tiny regions dropped)."""
    manifest = load_manifest(pseudo_dir)
    train = set(fold.train_classes)
    have_mask = {e["id"] for e in manifest["entries"]}
    model.eval()
    images = []
    with torch.no_grad():
        for sid in dataset.ids():
            sample = dataset.samples[sid]
            if sample.class_set and not (sample.class_set & train):
                continue
            if sid not in have_mask:
                logger.warning("no pseudo mask for %s; skipping", sid)
                continue
            feat = encode(model, sample.pixels, source_id=sid)
            embedding = feat.values.mean(dim=(1, 2)).cpu().numpy()
            pm = load_pseudo_mask(pseudo_dir, sid)
            small = downsample_mask(pm, feat.stride, feat.values.shape[-2:])
            regions = []
            for label in range(1, manifest["k"] + 1):
                if np.count_nonzero(small == label) < MIN_REGION_PIXELS:
                    continue
                proto = masked_average_pool(feat, small, label, origin="region")
                regions.append((label, proto.vector.cpu().numpy()))
            images.append(BankImage(image_id=sid, embedding=embedding, regions=regions))
    if not images:
        raise RectifierError("empty region bank")
    return RegionBank(images=images)


def rectify_foreground(support_proto: Prototype, support_embedding, bank: RegionBank,
                       n_images=DEFAULT_TOP_IMAGES, beta=DEFAULT_BETA):
    """Mix the support prototype with the most support-similar region from each
    of the top-N most relevant bank images.

    Returns (Prototype, used_regions: bool); when every selected image is
    region-less the support prototype comes back unchanged."""
    if not bank.images:
        raise RectifierError("empty region bank")
    if not 0 <= beta <= 1:
        raise RectifierError("beta must be in [0, 1]")
    if n_images < 1:
        raise RectifierError("n_images must be >= 1")
    dtype = support_proto.vector.dtype
    emb = support_embedding
    if not torch.is_tensor(emb):
        emb = torch.from_numpy(np.asarray(emb)).to(dtype)

    # stable similarity-then-id ordering so bank storage order never matters
    sims = []
    for img in bank.images:
        s = float(cosine(emb, torch.from_numpy(img.embedding).to(dtype)))
        sims.append((-s, img.image_id, img))
    sims.sort(key=lambda t: (t[0], t[1]))
    selected = [img for _, _, img in sims[:n_images]]

    region_vecs, region_cos = [], []
    for img in selected:
        if not img.regions:
            continue
        best, best_cos = None, None
        for _, vec in img.regions:
            c = float(cosine(support_proto.vector, torch.from_numpy(vec).to(dtype)))
            if best_cos is None or c > best_cos:
                best, best_cos = vec, c
        region_vecs.append(torch.from_numpy(best).to(dtype))
        region_cos.append(best_cos)
    if not region_vecs:
        return support_proto, False

    mu = np.maximum(np.asarray(region_cos, dtype=np.float64), MU_CLAMP)
    mu = mu / mu.sum()
    mix = sum(float(m) * v for m, v in zip(mu, region_vecs))
    vec = (1.0 - beta) * support_proto.vector + beta * mix
    return Prototype(vector=vec, class_id=support_proto.class_id, origin="support_fg"), True


# --- binary sidecar format ------------------------------------------------
# magic 'LPRB', u32 version, u32 C, u32 num_images; then per image:
#   u16 id_len, id bytes, C float64 embedding, u32 num_regions,
#   then per region: u8 label, C float64 vector.

BANK_MAGIC = b"LPRB"
BANK_VERSION = 1


def save_region_bank(bank: RegionBank, path):
    c = len(bank.images[0].embedding)
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<III", BANK_VERSION, c, len(bank.images)))
        for img in bank.images:
            ident = img.image_id.encode()
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            f.write(np.asarray(img.embedding, dtype=np.float64).tobytes())
            f.write(struct.pack("<I", len(img.regions)))
            for label, vec in img.regions:
                f.write(struct.pack("<B", label))
                f.write(np.asarray(vec, dtype=np.float64).tobytes())


def load_region_bank(path) -> RegionBank:
    with open(path, "rb") as f:
        if f.read(4) != BANK_MAGIC:
            raise RectifierError(f"{path} is not a region bank")
        version, c, n = struct.unpack("<III", f.read(12))
        if version != BANK_VERSION:
            raise RectifierError(f"unsupported region bank version {version}")
        images = []
        for _ in range(n):
            (id_len,) = struct.unpack("<H", f.read(2))
            ident = f.read(id_len).decode()
            embedding = np.frombuffer(f.read(8 * c), dtype=np.float64).copy()
            (nr,) = struct.unpack("<I", f.read(4))
            regions = []
            for _ in range(nr):
                (label,) = struct.unpack("<B", f.read(1))
                vec = np.frombuffer(f.read(8 * c), dtype=np.float64).copy()
                regions.append((label, vec))
            images.append(BankImage(image_id=ident, embedding=embedding, regions=regions))
    return RegionBank(images=images)


def bank_path_for(checkpoint_path):
    return Path(checkpoint_path).with_suffix(".bank")
