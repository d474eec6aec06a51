"""Feature extractor, auxiliary segmentation head, and checkpoint container."""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field, asdict
from math import ceil

import numpy as np
import torch
import torch.nn as nn

# Input normalization: scale to [0,1], then fixed per-channel mean/std.
INPUT_MEAN = 0.5
INPUT_STD = 0.25


class EncoderError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    arch: str = "tiny"  # tiny | residual50 | residual101
    feature_channels: int = 16
    output_stride: int = 4
    pretrained_init: str | None = None

    def __post_init__(self):
        if self.arch not in ("tiny", "residual50", "residual101"):
            raise EncoderError(f"unknown arch {self.arch!r}")


@dataclass
class FeatureMap:
    values: torch.Tensor  # C x H' x W'
    source_id: str
    stride: int


class TinyEncoder(nn.Module):
    """4 conv blocks, stride-2 twice (s=4); no rectifier after the final conv
    so features can go negative for cosine matching."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c = config.feature_channels
        self.config = config
        self.block1 = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU())
        self.block2 = nn.Sequential(
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.ReLU()
        )
        self.block3 = nn.Sequential(
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.ReLU()
        )
        self.block4 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        x = self.block1(x)
        x = self.block2(x)
        x = self.block3(x)
        return self.block4(x)


class ResidualEncoder(nn.Module):
    """Truncated torchvision residual backbone: last stage dropped, final ReLU removed."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        from torchvision import models

        builder = models.resnet50 if config.arch == "residual50" else models.resnet101
        net = builder(weights=None)
        if config.pretrained_init:
            net.load_state_dict(torch.load(config.pretrained_init, map_location="cpu"))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3 = net.layer3
        self.config = config

    def forward(self, x):
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        # run the last block of layer3 by hand to skip its output ReLU
        for block in self.layer3[:-1]:
            x = block(x)
        last = self.layer3[-1]
        identity = last.downsample(x) if last.downsample is not None else x
        out = last.conv1(x)
        out = last.relu(last.bn1(out))
        out = last.conv2(out)
        out = last.relu(last.bn2(out))
        out = last.bn3(last.conv3(out))
        return out + identity


class AuxHead(nn.Module):
    """Three convs, BN+ReLU after each except the last; logits over K+1 pseudo classes."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        c = in_channels
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(),
            nn.Conv2d(c, num_classes, 3, padding=1),
        )

    def forward(self, feature):
        if feature.shape[-3] != self.net[0].in_channels:
            raise EncoderError(
                f"feature has {feature.shape[-3]} channels, head expects {self.net[0].in_channels}"
            )
        return self.net(feature)


def build_encoder(config: EncoderConfig) -> nn.Module:
    if config.arch == "tiny":
        return TinyEncoder(config)
    return ResidualEncoder(config)


def normalize_image(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W normalized tensor."""
    x = torch.from_numpy(np.array(pixels, copy=True)).to(dtype) / 255.0
    x = (x - INPUT_MEAN) / INPUT_STD
    return x.permute(2, 0, 1)


def _locate_nonfinite_layer(model, x):
    for name, module in model.named_children():
        x = module(x)
        if not torch.isfinite(x).all():
            return name
    return "output"


def encode(model: nn.Module, pixels: np.ndarray, source_id: str = "") -> FeatureMap:
    """Forward one image to a FeatureMap; fails loudly on non-finite activations."""
    stride = model.config.output_stride
    if pixels.shape[0] < stride or pixels.shape[1] < stride:
        raise EncoderError(f"image {pixels.shape[:2]} smaller than stride {stride}")
    dtype = next(model.parameters()).dtype
    x = normalize_image(pixels, dtype=dtype).unsqueeze(0)
    out = model(x)[0]
    if not torch.isfinite(out).all():
        layer = _locate_nonfinite_layer(model, x)
        raise EncoderError(f"non-finite activations produced by layer {layer!r}")
    h, w = pixels.shape[:2]
    assert out.shape[-2:] == (ceil(h / stride), ceil(w / stride))
    return FeatureMap(values=out, source_id=source_id, stride=stride)


def encoder_fingerprint(model: nn.Module) -> str:
    """Stable hash over the parameter arrays, used to detect stale derived artifacts."""
    h = hashlib.sha256()
    for name in sorted(model.state_dict()):
        t = model.state_dict()[name]
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


# --- checkpoint container -------------------------------------------------
# A checkpoint is a pickled dict (format_version 1) with keys:
#   config           dict echo of the training configuration
#   encoder_config   dict echo of EncoderConfig
#   encoder_state    name -> float numpy array
#   aux_state        name -> array, or None when the mining branch was off
#   ema_encoder_state / ema_aux_state   EMA shadow copies (same layout)
#   global_bg        C-vector numpy array or None
#   step             int

CHECKPOINT_VERSION = 1


def _state_to_numpy(module):
    if module is None:
        return None
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module, state):
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})


def save_checkpoint(path, *, config, encoder_config, encoder, aux_head, ema_encoder,
                    ema_aux, global_bg, step):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dict(config),
        "encoder_config": asdict(encoder_config),
        "encoder_state": _state_to_numpy(encoder),
        "aux_state": _state_to_numpy(aux_head),
        "ema_encoder_state": _state_to_numpy(ema_encoder),
        "ema_aux_state": _state_to_numpy(ema_aux),
        "global_bg": None if global_bg is None else np.asarray(global_bg),
        "step": int(step),
    }
    with open(path, "wb") as f:
        f.write(pickle.dumps(payload, protocol=4))


def load_checkpoint(path):
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version in {path}")
    return payload


def restore_encoder(payload, use_ema=True):
    """Build the inference encoder from a checkpoint payload (EMA weights by default)."""
    cfg = EncoderConfig(**payload["encoder_config"])
    model = build_encoder(cfg)
    key = "ema_encoder_state" if use_ema and payload["ema_encoder_state"] else "encoder_state"
    _load_state(model, payload[key])
    model.eval()
    return model
