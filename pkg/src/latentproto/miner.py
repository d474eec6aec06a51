"""Offline latent-class mining: collect prototypes over the training fold,
cluster them into a representative set, and densely pseudo-annotate images."""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import IGNORE_LABEL, ImageSample, SegDataset
from .encoder import encode, encoder_fingerprint
from .protomath import Prototype, masked_average_pool, nn_classify

logger = logging.getLogger(__name__)


class MinerError(RuntimeError):
    pass


@dataclass
class RepresentativeSet:
    background: Prototype  # index 0
    clusters: list  # K Prototypes, indices 1..K
    k: int
    encoder_fingerprint: str

    def all_prototypes(self):
        return [self.background] + list(self.clusters)


@dataclass
class PseudoMask:
    labels: np.ndarray  # H x W ints in {0..K}
    source_id: str
    rep_fingerprint: str


def downsample_mask(mask, stride, out_shape):
    """Nearest-neighbor mask downsampling to feature resolution."""
    h, w = out_shape
    rows = np.minimum(np.arange(h) * stride, mask.shape[0] - 1)
    cols = np.minimum(np.arange(w) * stride, mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


def upsample_labels(labels, stride, out_shape):
    """Nearest-neighbor upsample of a feature-resolution label map to image size."""
    up = np.repeat(np.repeat(labels, stride, axis=0), stride, axis=1)
    return up[: out_shape[0], : out_shape[1]]


def collect_prototypes(dataset: SegDataset, fold, model):
    """One prototype per (image, present train class), plus one background
    prototype per image that has background pixels. Test-fold classes are
    remapped to background first so no held-out features leak into P_fg."""
    model.eval()
    train = set(fold.train_classes)
    test = set(fold.test_classes)
    p_fg, p_bg = [], []
    with torch.no_grad():
        for sid in dataset.ids():
            sample = dataset.samples[sid]
            if not (sample.class_set & train):
                continue
            mask = sample.mask.copy()
            for c in test:
                mask[mask == c] = 0
            if np.all(mask == IGNORE_LABEL):
                logger.warning("skipping %s: mask entirely ignore", sid)
                continue
            feat = encode(model, sample.pixels, source_id=sid)
            small = downsample_mask(mask, feat.stride, feat.values.shape[-2:])
            for c in sorted(sample.class_set & train):
                if np.any(small == c):
                    p_fg.append(masked_average_pool(feat, small, c, origin="support_fg"))
            if np.any(small == 0):
                p_bg.append(masked_average_pool(feat, small, 0, origin="support_bg"))
    return p_fg, p_bg


def _kmeans_pp_init(points, k, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - np.stack(centers)[None]) ** 2).sum(-1), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(points[rng.integers(n)])
            continue
        centers.append(points[rng.choice(n, p=d2 / total)])
    return np.stack(centers)


def kmeans_with_history(points, k, seed, tol=1e-6, max_iter=300):
    """Seeded Lloyd iterations from k-means++ init.

    Returns (centers, labels, objective_trace). Empty clusters are re-seeded
    with the point farthest from its assigned center.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise MinerError(f"kmeans needs 1 <= k <= |points|, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, k, rng)
    trace = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), labels].sum()))
        new_centers = centers.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new_centers[j] = points[sel].mean(axis=0)
            else:
                new_centers[j] = points[np.argmax(d2[np.arange(n), labels])]
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    trace.append(float(d2[np.arange(n), labels].sum()))
    return centers, labels, trace


def kmeans(points, k, seed):
    centers, _, _ = kmeans_with_history(points, k, seed)
    return centers


def build_rep_set(p_fg, p_bg, k, seed, fingerprint="") -> RepresentativeSet:
    """K cluster centers from the foreground prototypes plus one averaged
    background prototype at index 0."""
    if not p_fg:
        raise MinerError("no foreground prototypes to cluster")
    if not p_bg:
        raise MinerError("no background prototypes: cannot build a background descriptor")
    fg = np.stack([p.vector.detach().cpu().numpy() for p in p_fg]).astype(np.float64)
    centers = kmeans(fg, k, seed)
    bg_vec = np.stack([p.vector.detach().cpu().numpy() for p in p_bg]).mean(axis=0)
    dtype = p_fg[0].vector.dtype
    clusters = [
        Prototype(vector=torch.from_numpy(c).to(dtype), class_id=i + 1, origin="cluster_center")
        for i, c in enumerate(centers)
    ]
    background = Prototype(
        vector=torch.from_numpy(bg_vec).to(dtype), class_id=0, origin="global_bg"
    )
    return RepresentativeSet(
        background=background, clusters=clusters, k=k, encoder_fingerprint=fingerprint
    )


def annotate(sample, model, rep: RepresentativeSet) -> PseudoMask:
    """Nearest-neighbor pseudo labels at feature resolution, upsampled to image size.

    Works identically for unlabeled images (a bare pixel array is accepted)."""
    if rep.encoder_fingerprint:
        fp = encoder_fingerprint(model)
        if fp != rep.encoder_fingerprint:
            raise MinerError(
                f"stale representative set: encoder fingerprint {fp} != {rep.encoder_fingerprint}"
            )
    pixels = sample.pixels if isinstance(sample, ImageSample) else sample
    sid = sample.id if isinstance(sample, ImageSample) else ""
    model.eval()
    with torch.no_grad():
        feat = encode(model, pixels, source_id=sid)
    labels = nn_classify(feat, rep.all_prototypes())
    full = upsample_labels(labels, feat.stride, pixels.shape[:2])
    return PseudoMask(labels=full, source_id=sid, rep_fingerprint=rep.encoder_fingerprint)


def save_rep_set(rep: RepresentativeSet, path):
    payload = {
        "k": rep.k,
        "fingerprint": rep.encoder_fingerprint,
        "background": rep.background.vector.detach().cpu().numpy(),
        "clusters": np.stack([c.vector.detach().cpu().numpy() for c in rep.clusters]),
    }
    with open(path, "wb") as f:
        f.write(pickle.dumps(payload, protocol=4))


def load_rep_set(path) -> RepresentativeSet:
    with open(path, "rb") as f:
        payload = pickle.load(f)
    background = Prototype(
        vector=torch.from_numpy(payload["background"]), class_id=0, origin="global_bg"
    )
    clusters = [
        Prototype(vector=torch.from_numpy(np.array(v)), class_id=i + 1, origin="cluster_center")
        for i, v in enumerate(payload["clusters"])
    ]
    return RepresentativeSet(
        background=background, clusters=clusters, k=int(payload["k"]),
        encoder_fingerprint=payload["fingerprint"],
    )


def annotate_dataset(source, model, rep: RepresentativeSet, out_dir, seed=None, extra_unlabeled=None):
    """Write one pseudo-mask PNG per image plus a manifest.json.

    `source` is a SegDataset (labeled entries); `extra_unlabeled` an optional
    directory of bare images appended as unlabeled entries."""
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    errors = []

    def _one(sid, pixels, labeled):
        try:
            pm = annotate(pixels, model, rep)
            Image.fromarray(pm.labels.astype(np.uint8)).save(out_dir / "masks" / f"{sid}.png")
            entries.append({"id": sid, "labeled": labeled})
        except Exception as exc:  # pragma: no cover - per-file IO failures
            errors.append({"id": sid, "error": str(exc)})

    if isinstance(source, SegDataset):
        for sid in source.ids():
            _one(sid, source.samples[sid].pixels, True)
    else:
        for p in sorted(Path(source).glob("*")):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg"):
                _one(p.stem, np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8), True)
    if extra_unlabeled:
        for p in sorted(Path(extra_unlabeled).glob("*")):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg"):
                _one(p.stem, np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8), False)

    manifest = {
        "fingerprint": rep.encoder_fingerprint,
        "k": rep.k,
        "seed": seed,
        "entries": entries,
        "errors": errors,
        "partial": bool(errors),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_manifest(pseudo_dir):
    with open(Path(pseudo_dir) / "manifest.json") as f:
        return json.load(f)


def load_pseudo_mask(pseudo_dir, sid):
    return np.asarray(Image.open(Path(pseudo_dir) / "masks" / f"{sid}.png"), dtype=np.uint8)
