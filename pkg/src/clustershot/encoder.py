"""Convolutional embedding network and checkpoint IO.

Standard four-block architecture: each block is conv3x3 -> batch norm ->
ReLU -> 2x2 max pool, 64 channels throughout, flattened at the end. Batch
norm runs in train mode inside the pre-training step and in eval mode
(running statistics) everywhere embeddings feed clustering diagnostics or
episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .seeding import DOMAIN_INIT, derived_int

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input images do not match the encoder configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    image_shape: tuple[int, int, int] = (28, 28, 1)  # H, W, C
    blocks: int = 4
    channels: int = 64

    @property
    def spatial_out(self) -> tuple[int, int]:
        h, w, _ = self.image_shape
        for _ in range(self.blocks):
            h, w = h // 2, w // 2
        return h, w

    @property
    def embedding_dim(self) -> int:
        h, w = self.spatial_out
        return self.channels * h * w

    def validate(self) -> None:
        h, w, c = self.image_shape
        if self.blocks < 1 or self.channels < 1:
            raise ValueError("blocks and channels must be positive")
        oh, ow = self.spatial_out
        if oh < 1 or ow < 1:
            raise ValueError(
                f"input {h}x{w} collapses to zero extent after {self.blocks} pooling stages; "
                f"needs at least {2 ** self.blocks}x{2 ** self.blocks}"
            )
        if c not in (1, 3):
            raise ValueError(f"unsupported channel count {c}")


class ConvEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        config.validate()
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        cin = config.image_shape[2]
        for _ in range(config.blocks):
            layers += [
                nn.Conv2d(cin, config.channels, kernel_size=3, padding=1),
                nn.BatchNorm2d(config.channels),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            cin = config.channels
        self.features = nn.Sequential(*layers)
        self.flatten = nn.Flatten()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.flatten(self.features(x))

    def embed(self, images, train: bool = False) -> torch.Tensor:
        """Embed a batch of images; rows follow input order.

        ``images`` is (N, H, W, C) numpy/tensor in [0, 1] or an (N, C, H, W)
        tensor. Train mode uses batch statistics in the norm layers and
        updates their running estimates; gradients flow either way.
        """
        x = _to_input_tensor(images, self.config, dtype=next(self.parameters()).dtype)
        self.train(train)
        return self.forward(x)

    def flat_parameters(self) -> list[torch.Tensor]:
        """Trainable parameters in stable registration order."""
        return [p for p in self.parameters()]


def _to_input_tensor(images, config: EncoderConfig, dtype: torch.dtype) -> torch.Tensor:
    h, w, c = config.image_shape
    if isinstance(images, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(images))
    else:
        t = images
    if t.dim() != 4:
        raise ShapeError(f"expected a 4-d batch, got shape {tuple(t.shape)}")
    if t.shape[1:] == (h, w, c):
        t = t.permute(0, 3, 1, 2)
    elif t.shape[1:] != (c, h, w):
        raise ShapeError(
            f"batch shape {tuple(t.shape[1:])} does not match encoder input "
            f"{(h, w, c)} (channels-last) or {(c, h, w)} (channels-first)"
        )
    return t.to(dtype).contiguous()


def init_encoder(config: EncoderConfig, seed: int) -> ConvEncoder:
    """Build an encoder with deterministically seeded initial parameters."""
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(derived_int(seed, DOMAIN_INIT))
        return ConvEncoder(config)


def save_encoder(path: str | Path, encoder: ConvEncoder, extra: dict | None = None) -> None:
    """Write a versioned checkpoint: config echo, parameters, optional extras."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder_config": asdict(encoder.config),
        "encoder_state": encoder.state_dict(),
    }
    if extra:
        overlapping = set(extra) & set(payload)
        if overlapping:
            raise ValueError(f"extra keys collide with checkpoint fields: {overlapping}")
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_encoder(path: str | Path) -> tuple[ConvEncoder, dict]:
    """Load a checkpoint; returns the encoder and the full payload dict."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    cfg_dict = dict(payload["encoder_config"])
    cfg_dict["image_shape"] = tuple(cfg_dict["image_shape"])
    config = EncoderConfig(**cfg_dict)
    encoder = ConvEncoder(config)
    encoder.load_state_dict(payload["encoder_state"])
    encoder.eval()
    return encoder, payload
