"""Small U-shaped segmentation backbone, pretraining, and freezing.

The network is an explicit list of N = 2*num_scales + 1 blocks (encoder
stages, bottleneck, decoder stages).  Downstream code walks the block list and
may rewrite each block's output via a hook, which is how prompt updaters get
inserted without the backbone knowing about them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as tf
from torch import nn

from .errors import (
    CheckpointError,
    InvalidArgumentError,
    TrainingFailureError,
)

CHECKPOINT_VERSION = "promptseg-backbone-v1"


@dataclass(frozen=True)
class BackboneConfig:
    num_scales: int = 3
    base_channels: int = 16
    input_channels: int = 1
    num_classes_pretrain: int = 2

    def __post_init__(self):
        if self.num_scales < 2:
            raise InvalidArgumentError("num_scales must be >= 2")
        if self.base_channels < 8:
            raise InvalidArgumentError("base_channels must be >= 8")


def _norm(channels):
    groups = 8 if channels % 8 == 0 else (4 if channels % 4 == 0 else 1)
    return nn.GroupNorm(groups, channels)


class ConvBlock(nn.Module):
    """Two 3x3 conv + GroupNorm + ReLU layers."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class Backbone(nn.Module):
    """Encoder-decoder with skips; blocks indexed 0..N-1, bottleneck at index
    num_scales.  block_out_channels[i] is the channel count after block i."""

    def __init__(self, config: BackboneConfig, seed: int):
        super().__init__()
        torch.manual_seed(int(seed))
        self.config = config
        s = config.num_scales
        enc_ch = [config.base_channels * 2**i for i in range(s)]
        bott_ch = config.base_channels * 2**s

        blocks = []
        in_ch = config.input_channels
        for c in enc_ch:
            blocks.append(ConvBlock(in_ch, c))
            in_ch = c
        blocks.append(ConvBlock(enc_ch[-1], bott_ch))
        up_in = bott_ch
        for c in reversed(enc_ch):
            blocks.append(ConvBlock(up_in + c, c))
            up_in = c
        self.blocks = nn.ModuleList(blocks)
        self.block_out_channels = enc_ch + [bott_ch] + enc_ch[::-1]
        self.num_blocks = len(blocks)
        self.pool = nn.MaxPool2d(2)
        self.head = nn.Conv2d(enc_ch[0], config.num_classes_pretrain, 1)

    def _check_input(self, x):
        s = self.config.num_scales
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise InvalidArgumentError(
                f"expected [B,{self.config.input_channels},H,W] input, got {tuple(x.shape)}"
            )
        if x.shape[2] % 2**s or x.shape[3] % 2**s:
            raise InvalidArgumentError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {2**s}"
            )

    def forward_features(self, x, block_hook=None):
        """Run all blocks; block_hook(i, h) may rewrite each block output."""
        self._check_input(x)
        s = self.config.num_scales
        skips = []
        h = x
        for i, block in enumerate(self.blocks):
            if 1 <= i <= s:
                h = self.pool(h)
            elif i > s:
                h = tf.interpolate(h, scale_factor=2, mode="bilinear",
                                   align_corners=False)
                h = torch.cat([h, skips[2 * s - i]], dim=1)
            h = block(h)
            if block_hook is not None:
                h = block_hook(i, h)
            if i < s:
                skips.append(h)
        return h

    def forward(self, x):
        return self.head(self.forward_features(x))

    def bottleneck_feature(self, x):
        """Global-average-pooled bottleneck activation, [B, F]."""
        self._check_input(x)
        s = self.config.num_scales
        h = x
        for i in range(s + 1):
            if i >= 1:
                h = self.pool(h)
            h = self.blocks[i](h)
        return h.mean(dim=(2, 3))


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    return Backbone(config, seed)


def _to_batch(image):
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image)).float()
    if image.ndim == 3:
        image = image[None]
    return image


def soft_dice_loss(logits, target, eps=1e-5):
    """1 - soft Dice over foreground channels, for pretraining."""
    probs = torch.softmax(logits, dim=1)
    fg = probs[:, 1:].sum(dim=1)
    y = (target > 0).float()
    inter = (fg * y).sum()
    return 1.0 - (2 * inter + eps) / (fg.sum() + y.sum() + eps)


class FrozenBackbone:
    """Immutable wrapper: eval mode, requires_grad off, hashable weights."""

    def __init__(self, network: Backbone, metadata=None):
        network.eval()
        for p in network.parameters():
            p.requires_grad_(False)
        self.network = network
        self.config = network.config
        self.metadata = dict(metadata or {})

    def weights_hash(self):
        h = hashlib.sha256()
        for name, tensor in sorted(self.network.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def extract_features(self, image):
        """Task-agnostic feature vector: pooled bottleneck activation."""
        x = _to_batch(image)
        with torch.no_grad():
            feats = self.network.bottleneck_feature(x)
        out = feats.cpu().numpy()
        return out[0] if out.shape[0] == 1 else out


def extract_features(frozen: FrozenBackbone, image):
    return frozen.extract_features(image)


def _dice_of_masks(pred, gt, eps=1e-8):
    inter = np.logical_and(pred, gt).sum()
    denom = pred.sum() + gt.sum()
    return 1.0 if denom == 0 else 2.0 * inter / (denom + eps)


def pretrain(backbone: Backbone, pretrain_cases, epochs, lr=1e-3, seed=0,
             val_fraction=0.2, batch_size=8) -> FrozenBackbone:
    """Supervised pretraining on the organ task; returns the frozen network.

    Held-out organ Dice is recorded in the returned metadata.
    """
    cases = list(pretrain_cases)
    if len(cases) < 20:
        raise InvalidArgumentError("pretraining needs at least 20 cases")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cases))
    n_val = max(1, int(round(val_fraction * len(cases))))
    val_idx, train_idx = order[:n_val], order[n_val:]

    torch.manual_seed(int(seed))
    backbone.train()
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(perm), batch_size):
            batch = perm[start:start + batch_size]
            x = torch.from_numpy(np.stack([cases[i].image for i in batch])).float()
            y = torch.from_numpy(np.stack([cases[i].mask for i in batch])).long()
            logits = backbone(x)
            loss = tf.cross_entropy(logits, y) + soft_dice_loss(logits, y)
            if not torch.isfinite(loss):
                raise TrainingFailureError(
                    "pretraining loss became non-finite",
                    diagnostics={"epoch": epoch, "batch_start": int(start),
                                 "loss": float(loss.item())},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.item()) * len(batch)
        history.append(epoch_loss / max(1, len(perm)))

    backbone.eval()
    dices = []
    with torch.no_grad():
        for i in val_idx:
            logits = backbone(_to_batch(cases[i].image))
            pred = logits.argmax(dim=1)[0].numpy() > 0
            dices.append(_dice_of_masks(pred, cases[i].mask > 0))
    metadata = {
        "val_dice": float(np.mean(dices)) if dices else math.nan,
        "epochs": epochs,
        "n_train": len(train_idx),
        "n_val": len(val_idx),
        "loss_history": history,
    }
    return FrozenBackbone(backbone, metadata)


def save_backbone_checkpoint(path, model, frozen=None):
    """Persist backbone weights with config echo, version, and freeze flag."""
    if isinstance(model, FrozenBackbone):
        network, is_frozen, metadata = model.network, True, model.metadata
    else:
        network, is_frozen, metadata = model, bool(frozen), {}
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": asdict(network.config),
        "state_dict": network.state_dict(),
        "frozen": is_frozen,
        "metadata": metadata,
    }, path)


def load_backbone_checkpoint(path, trainable=False, override_freeze=False):
    """Load a checkpoint; frozen checkpoints refuse a trainable slot unless
    override_freeze is set."""
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ckpt.get('version')}")
    config = BackboneConfig(**ckpt["config"])
    network = Backbone(config, seed=0)
    network.load_state_dict(ckpt["state_dict"])
    if ckpt["frozen"] and trainable and not override_freeze:
        raise CheckpointError(
            "checkpoint is frozen; pass override_freeze=True to load it trainable"
        )
    if trainable:
        return network
    return FrozenBackbone(network, ckpt.get("metadata"))
