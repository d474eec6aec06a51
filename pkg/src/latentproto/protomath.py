"""Prototype math: masked average pooling, cosine score maps, episodic loss,
and nearest-neighbor pseudo-classification. Everything here is a pure function
of its tensors and differentiable where that matters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import IGNORE_LABEL
from .encoder import FeatureMap

COSINE_EPS = 1e-8
DEFAULT_SIGMA = 20.0


class ProtoError(RuntimeError):
    pass


@dataclass
class Prototype:
    vector: torch.Tensor  # C
    class_id: int
    origin: str  # support_fg | support_bg | cluster_center | global_bg | region


@dataclass
class ScoreMap:
    probs: torch.Tensor  # num_classes x H' x W'


def masked_average_pool(feature, mask, class_id, origin="support_fg") -> Prototype:
    """Mean of feature columns where mask == class_id.

    `feature` may be a FeatureMap or a raw C x H' x W' tensor; `mask` must be at
    feature resolution. An empty region is an error, never a silent zero vector.
    """
    values = feature.values if isinstance(feature, FeatureMap) else feature
    if not torch.is_tensor(mask):
        mask = torch.from_numpy(np.ascontiguousarray(mask))
    sel = mask == class_id
    if not bool(sel.any()):
        raise ProtoError(f"empty region: class {class_id} absent from mask")
    vec = values[:, sel].mean(dim=1)
    return Prototype(vector=vec, class_id=int(class_id), origin=origin)


def cosine(u, v):
    """Cosine similarity with an epsilon guard on each norm; zero inputs give 0."""
    nu = torch.linalg.vector_norm(u) + COSINE_EPS
    nv = torch.linalg.vector_norm(v) + COSINE_EPS
    return (u * v).sum() / (nu * nv)


def _cosine_map(values, vectors):
    """Pixel-wise cosines against a stack of prototype vectors -> P x H' x W'."""
    fnorm = torch.linalg.vector_norm(values, dim=0) + COSINE_EPS
    pnorm = torch.linalg.vector_norm(vectors, dim=1) + COSINE_EPS
    dots = torch.einsum("pc,chw->phw", vectors, values)
    return dots / (pnorm[:, None, None] * fnorm[None])


def score_map(feature, prototypes, sigma=DEFAULT_SIGMA) -> ScoreMap:
    """Per-pixel softmax over sigma-scaled cosine similarities to each prototype."""
    if len(prototypes) < 2:
        raise ProtoError("score_map needs at least 2 prototypes")
    if sigma <= 0:
        raise ProtoError("sigma must be positive")
    values = feature.values if isinstance(feature, FeatureMap) else feature
    vectors = torch.stack([p.vector for p in prototypes])
    cos = _cosine_map(values, vectors)
    return ScoreMap(probs=torch.softmax(sigma * cos, dim=0))


def episodic_loss(score: ScoreMap, gt_mask):
    """Mean negative log-probability of the true class over non-ignore pixels."""
    if not torch.is_tensor(gt_mask):
        gt_mask = torch.from_numpy(np.ascontiguousarray(gt_mask))
    gt_mask = gt_mask.long()
    valid = gt_mask != IGNORE_LABEL
    if not bool(valid.any()):
        raise ProtoError("empty supervision: all pixels are ignore")
    probs = score.probs
    safe_gt = torch.where(valid, gt_mask, torch.zeros_like(gt_mask))
    picked = probs.gather(0, safe_gt.unsqueeze(0))[0]
    return -(torch.log(picked[valid])).mean()


def nn_classify(feature, prototypes) -> np.ndarray:
    """Argmax-cosine label map over prototypes; ties go to the lowest index."""
    if not prototypes:
        raise ProtoError("nn_classify needs a non-empty prototype set")
    values = feature.values if isinstance(feature, FeatureMap) else feature
    vectors = torch.stack([p.vector for p in prototypes])
    with torch.no_grad():
        cos = _cosine_map(values, vectors).cpu().numpy()
    # np.argmax returns the first maximal index, which is the tie-break we want
    return np.argmax(cos, axis=0).astype(np.int64)
