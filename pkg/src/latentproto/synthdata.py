"""Synthetic dataset with planted base classes and planted latent classes.

Latent objects are painted into the images but labeled as background in the
public masks; an oracle directory records their true pixel labels so mining
quality can be scored exactly."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .miner import load_manifest, load_pseudo_mask


class SynthError(RuntimeError):
    pass

MIN_SIGNATURE_DISTANCE = 25.0  # euclidean distance between class signature vectors


@dataclass
class SynthConfig:
    num_base_classes: int = 2
    num_latent_classes: int = 2
    images: int = 60
    image_size: int = 96
    objects_per_image: tuple = (2, 4)
    seed: int = 0
    noise_std: float = 8.0
    texture_strength: float = 0.25
    distractors: int = 0  # small random-hue background blobs (kept label 0)
    saturation: float = 0.95
    value: float = 0.95
    object_jitter: float = 0.0  # per-object hue/brightness spread around the class color
    bg_variation: float = 0.0  # per-image background tint spread
    latent_only_extras: bool = False  # extra objects beyond the first are latent-class
    object_scale: float = 1.0  # multiplier on object radii

    def class_signatures(self):
        """Base classes get evenly spread hues; each latent class sits at a
        small hue offset from one base class, so latent objects share
        appearance commonalities with labeled foreground. Every class also
        carries its own stripe angle and frequency."""
        nb, nl = self.num_base_classes, self.num_latent_classes
        n = nb + nl
        s, v = self.saturation, self.value
        sigs = []
        for i in range(n):
            if i < nb:
                hue = i / nb
            else:
                j = i - nb
                hue = ((j % nb) / nb + 0.05 * (1 + j // nb)) % 1.0
            r, g, b = colorsys.hsv_to_rgb(hue, s, v)
            sigs.append({
                "color": np.array([r, g, b]) * 255,
                "hue": hue,
                "sat": s,
                "val": v,
                "angle": i * np.pi / n + 0.3,
                "freq": 0.35 + 0.12 * (i % 3),
            })
        # distinguishability: color distance plus an angle/frequency term
        vecs = np.stack([
            np.concatenate([
                g["color"],
                [40 * np.cos(2 * g["angle"]), 40 * np.sin(2 * g["angle"]), 60 * g["freq"]],
            ])
            for g in sigs
        ])
        d = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() < MIN_SIGNATURE_DISTANCE:
            raise SynthError(
                f"class signatures too close: min distance {d.min():.1f} < {MIN_SIGNATURE_DISTANCE}"
            )
        return sigs

    def class_colors(self):
        return np.stack([g["color"] for g in self.class_signatures()])


def _texture(shape, sig, strength, rng):
    """Class-specific stripe modulation from the class signature."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.random() * 2 * np.pi
    wave = np.sin(sig["freq"] * (np.cos(sig["angle"]) * xx + np.sin(sig["angle"]) * yy) + phase)
    return 1.0 + strength * wave


def _render_image(config: SynthConfig, sigs, rng):
    s = config.image_size
    base_gray = rng.uniform(110, 145)
    bg_color = np.full(3, base_gray)
    if config.bg_variation > 0:
        # per-image background tint: support and query backgrounds differ
        bg_color = bg_color * (1.0 + config.bg_variation * rng.uniform(-1, 1, size=3))
    img = np.broadcast_to(bg_color, (s, s, 3)).astype(np.float64).copy()
    grad = np.linspace(-8, 8, s)[None, :, None] * rng.uniform(-1, 1)
    img = img + grad + rng.normal(0, config.noise_std, size=(s, s, 3))

    owner = np.zeros((s, s), dtype=np.int64)
    lo, hi = config.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1))
    n_base, n_latent = config.num_base_classes, config.num_latent_classes

    # always one base object (episodes need foreground); one latent when possible
    choices = [int(rng.integers(1, n_base + 1))]
    if n_latent > 0 and n_objects >= 2:
        choices.append(int(rng.integers(n_base + 1, n_base + n_latent + 1)))
    while len(choices) < n_objects:
        if config.latent_only_extras and n_latent > 0:
            # one base object per image: backgrounds never contain other
            # base classes, only latent objects and clutter
            choices.append(int(rng.integers(n_base + 1, n_base + n_latent + 1)))
        else:
            choices.append(int(rng.integers(1, n_base + n_latent + 1)))
    rng.shuffle(choices)

    yy, xx = np.mgrid[0:s, 0:s]

    # distractor clutter: small saturated blobs of arbitrary hue, always background
    for _ in range(config.distractors):
        cy, cx = rng.uniform(0.05 * s, 0.95 * s, size=2)
        r = rng.uniform(0.025 * s, 0.055 * s)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        hue = rng.random()
        col = np.array(colorsys.hsv_to_rgb(hue, 0.95, 0.95)) * 255
        img = np.where(inside[:, :, None], col[None, None, :]
                       + rng.normal(0, config.noise_std * 0.5, size=(s, s, 3)), img)

    for cid in choices:
        cy, cx = rng.uniform(0.2 * s, 0.8 * s, size=2)
        ry = config.object_scale * rng.uniform(0.14 * s, 0.26 * s)
        rx = config.object_scale * rng.uniform(0.14 * s, 0.26 * s)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        sig = sigs[cid - 1]
        tex = _texture((s, s), sig, config.texture_strength, rng)
        base = sig["color"]
        if config.object_jitter > 0:
            # each instance drifts around the class appearance
            j = config.object_jitter
            hue = (sig["hue"] + 0.04 * j * rng.uniform(-1, 1)) % 1.0
            base = np.array(colorsys.hsv_to_rgb(hue, sig["sat"], sig["val"])) * 255
            base = base * (1.0 + 0.5 * j * rng.uniform(-1, 1))
        color = base[None, None, :] * tex[:, :, None]
        jitter = rng.normal(0, config.noise_std * 0.5, size=(s, s, 3))
        img = np.where(inside[:, :, None], color + jitter, img)
        owner[inside] = cid

    # overdraw can leave unusable slivers of earlier objects; erase tiny regions
    for cid in set(choices):
        sel = owner == cid
        if 0 < np.count_nonzero(sel) < 60:
            owner[sel] = 0

    img = np.clip(img, 0, 255).astype(np.uint8)
    public = np.where(owner <= config.num_base_classes, owner, 0).astype(np.uint8)
    oracle = np.where(owner > config.num_base_classes, owner, 0).astype(np.uint8)
    return img, public, oracle


def generate(config: SynthConfig, out_dir):
    """Render the dataset, public masks, oracle masks, legend, and a default
    one-test-class-per-fold split config."""
    out = Path(out_dir)
    for sub in ("images", "masks", "oracle/masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    sigs = config.class_signatures()
    rng = np.random.default_rng(config.seed)
    ids = []
    for i in range(config.images):
        img, public, oracle = _render_image(config, sigs, rng)
        sid = f"synth_{i:04d}"
        ids.append(sid)
        Image.fromarray(img).save(out / "images" / f"{sid}.png")
        Image.fromarray(public).save(out / "masks" / f"{sid}.png")
        Image.fromarray(oracle).save(out / "oracle" / "masks" / f"{sid}.png")

    legend = {
        "base_classes": list(range(1, config.num_base_classes + 1)),
        "latent_classes": list(
            range(config.num_base_classes + 1,
                  config.num_base_classes + config.num_latent_classes + 1)
        ),
        "colors": {str(i + 1): [int(v) for v in g["color"]] for i, g in enumerate(sigs)},
    }
    with open(out / "oracle" / "legend.json", "w") as f:
        json.dump(legend, f, indent=2, sort_keys=True)

    splits = {
        "num_folds": config.num_base_classes,
        "folds": [{"test_classes": [c]} for c in range(1, config.num_base_classes + 1)],
    }
    with open(out / "splits.json", "w") as f:
        json.dump(splits, f, indent=2, sort_keys=True)
    return ids


def score_mining(pseudo_dir, dataset_root):
    """Purity and coverage of pseudo labels against the planted latent classes.

    coverage: fraction of latent pixels given a non-background pseudo label.
    purity: among covered pixels of a latent class, the share carrying that
    class's dominant pseudo label."""
    root = Path(dataset_root)
    with open(root / "oracle" / "legend.json") as f:
        legend = json.load(f)
    latent_classes = legend["latent_classes"]
    manifest = load_manifest(pseudo_dir)
    ids = [e["id"] for e in manifest["entries"] if e["labeled"]]

    per_class_counts = {c: {} for c in latent_classes}
    covered = {c: 0 for c in latent_classes}
    total = {c: 0 for c in latent_classes}
    for sid in ids:
        oracle_path = root / "oracle" / "masks" / f"{sid}.png"
        if not oracle_path.exists():
            raise SynthError(f"oracle mask missing for {sid}")
        oracle = np.asarray(Image.open(oracle_path), dtype=np.uint8)
        pseudo = load_pseudo_mask(pseudo_dir, sid)
        if oracle.shape != pseudo.shape:
            raise SynthError(f"oracle/pseudo shape mismatch for {sid}")
        for c in latent_classes:
            sel = oracle == c
            n = int(np.count_nonzero(sel))
            if n == 0:
                continue
            total[c] += n
            labels = pseudo[sel]
            nz = labels[labels != 0]
            covered[c] += int(nz.size)
            vals, counts = np.unique(nz, return_counts=True)
            for v, k in zip(vals, counts):
                per_class_counts[c][int(v)] = per_class_counts[c].get(int(v), 0) + int(k)

    report = {"per_class": {}, "min_purity": 1.0, "min_coverage": 1.0}
    for c in latent_classes:
        if total[c] == 0:
            raise SynthError(f"latent class {c} has no oracle pixels")
        cov = covered[c] / total[c]
        counts = per_class_counts[c]
        purity = (max(counts.values()) / sum(counts.values())) if counts else 0.0
        dominant = max(counts, key=counts.get) if counts else 0
        report["per_class"][c] = {
            "purity": purity, "coverage": cov, "dominant_label": dominant
        }
        report["min_purity"] = min(report["min_purity"], purity)
        report["min_coverage"] = min(report["min_coverage"], cov)
    return report
