"""Prompt machinery: meta prompt, prompt generators, feature-aware prompt
updaters (FPUs), per-prompt heads, and the multi-prompt forward pass.

The frozen backbone stays untouched; each FPU sits after one backbone block
and jointly rewrites the feature map and a prompt that is threaded through the
whole network.  Only FPUs, the prompt set, and the heads are trainable.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as tf
from torch import nn

from .backbone import FrozenBackbone
from .errors import CheckpointError, InvalidArgumentError, NumericError

PROMPTED_CHECKPOINT_VERSION = "promptseg-prompted-v1"


class MetaPrompt(nn.Module):
    """Trainable half-resolution prompt, initialized from a foreground prior."""

    def __init__(self, prior):
        super().__init__()
        prior = torch.as_tensor(np.asarray(prior), dtype=torch.float32)
        if prior.ndim != 3 or prior.shape[0] != 1:
            raise InvalidArgumentError(
                f"prior must be [1, H/2, W/2], got {tuple(prior.shape)}"
            )
        self.values = nn.Parameter(prior[None].clone())  # [1,1,h,w]


class PromptGenerator(nn.Module):
    """Upsample-then-convolve transform from the meta prompt to one prompt.

    A small trainable input perturbation keeps generators pairwise distinct
    even when the meta prompt is constant (e.g. all-zero prior).
    """

    def __init__(self, meta_shape, hidden=4):
        super().__init__()
        self.input_bias = nn.Parameter(0.05 * torch.randn(1, 1, *meta_shape))
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, meta):
        h = tf.interpolate(meta + self.input_bias, scale_factor=2,
                           mode="bilinear", align_corners=False)
        return self.conv2(tf.relu(self.conv1(h)))


class PromptSet(nn.Module):
    """Meta prompt plus K generator transforms."""

    def __init__(self, prior, num_prompts):
        super().__init__()
        if num_prompts < 2:
            raise InvalidArgumentError("need at least 2 prompts")
        self.meta = MetaPrompt(prior)
        meta_shape = tuple(self.meta.values.shape[2:])
        self.generators = nn.ModuleList(
            PromptGenerator(meta_shape) for _ in range(num_prompts)
        )
        self.num_prompts = num_prompts

    def generate(self, k):
        """Prompt k (1-based), shape [1, 1, H, W]."""
        if not 1 <= k <= self.num_prompts:
            raise InvalidArgumentError(f"prompt index {k} outside 1..{self.num_prompts}")
        return self.generators[k - 1](self.meta.values)

    def prompts(self):
        return [self.generate(k) for k in range(1, self.num_prompts + 1)]


def _pairwise_cos_max(prompts):
    flat = [p.reshape(-1) for p in prompts]
    worst = -1.0
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            c = tf.cosine_similarity(flat[i], flat[j], dim=0)
            worst = max(worst, float(c))
    return worst


def init_prompt_set(prior, num_prompts, seed):
    """Build a prompt set with pairwise-distinct generated prompts."""
    prior = np.asarray(prior)
    if prior.ndim != 3 or prior.shape[0] != 1:
        raise InvalidArgumentError(f"prior must be [1, H/2, W/2], got {prior.shape}")
    for attempt in range(10):
        torch.manual_seed(int(seed) + 7919 * attempt)
        ps = PromptSet(prior, num_prompts)
        with torch.no_grad():
            if _pairwise_cos_max(ps.prompts()) < 1.0 - 1e-6:
                return ps
    raise NumericError("could not initialize pairwise-distinct prompts")


class FPU(nn.Module):
    """Feature-aware prompt updater.

    Feature branch: 1x1 mix of [feature || prompt], multi-scale dilated
    context, channel attention; the gated context A rewrites the feature as
    F * A + F.  Prompt branch: depth-separable convolution over
    [updated feature || prompt].  An adapter first resamples the incoming
    prompt to the local feature shape.
    """

    def __init__(self, channels, prompt_in_channels, dilations=(1, 2, 4),
                 se_ratio=8):
        super().__init__()
        c = max(4, channels // 8)
        self.channels = channels
        self.adapter = nn.Conv2d(prompt_in_channels, channels, 1)
        self.reduce = nn.Conv2d(2 * channels, c, 1)
        self.dilated = nn.ModuleList(
            nn.Conv2d(c, c, 3, padding=d, dilation=d) for d in dilations
        )
        self.global_ctx = nn.Conv2d(c, c, 1)
        self.mix = nn.Conv2d((len(dilations) + 1) * c, channels, 1)
        # identity start: A == 0 until the mix conv learns, like adapter init
        nn.init.zeros_(self.mix.weight)
        nn.init.zeros_(self.mix.bias)
        hidden = max(2, channels // se_ratio)
        self.se = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, channels), nn.Sigmoid(),
        )
        groups = 8 if channels % 8 == 0 else (4 if channels % 4 == 0 else 1)
        self.prompt_dw = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1,
                                   groups=2 * channels)
        self.prompt_pw = nn.Conv2d(2 * channels, channels, 1, groups=groups)

    def forward(self, feature, prompt):
        if not torch.isfinite(feature).all() or not torch.isfinite(prompt).all():
            raise NumericError("non-finite FPU inputs")
        if prompt.shape[2:] != feature.shape[2:]:
            prompt = tf.interpolate(prompt, size=feature.shape[2:],
                                    mode="bilinear", align_corners=False)
        prompt = self.adapter(prompt)

        z = self.reduce(torch.cat([feature, prompt], dim=1))
        ctx = [conv(z) for conv in self.dilated]
        g = self.global_ctx(z.mean(dim=(2, 3), keepdim=True))
        ctx.append(g.expand(-1, -1, z.shape[2], z.shape[3]))
        attn = self.mix(torch.cat(ctx, dim=1))
        gate = self.se(attn.mean(dim=(2, 3)))
        attn = attn * gate[:, :, None, None]

        new_feature = feature * attn + feature
        new_prompt = self.prompt_pw(
            self.prompt_dw(torch.cat([new_feature, prompt], dim=1))
        )
        return new_feature, new_prompt


def fpu_forward(fpu, feature, prompt):
    return fpu(feature, prompt)


def _to_batch(x):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x)).float()
    if x.ndim == 3:
        x = x[None]
    return x


class PromptedModel(nn.Module):
    """Frozen backbone + N FPUs + prompt set + K heads.

    Only the FPUs, prompt set, and heads are trainable; the backbone weights
    are immutable and excluded from parameter reports.
    """

    def __init__(self, frozen: FrozenBackbone, prompt_set: PromptSet,
                 num_classes, seed=0):
        super().__init__()
        torch.manual_seed(int(seed))
        self.frozen = frozen
        self.prompt_set = prompt_set
        self.num_classes = num_classes
        channels = frozen.network.block_out_channels
        prompt_in = [1] + channels[:-1]
        self.fpus = nn.ModuleList(
            FPU(c, p) for c, p in zip(channels, prompt_in)
        )
        self.heads = nn.ModuleList(
            nn.Conv2d(channels[-1], num_classes, 1)
            for _ in range(prompt_set.num_prompts)
        )

    @property
    def num_prompts(self):
        return self.prompt_set.num_prompts

    def tunable_modules(self):
        return {"fpus": self.fpus, "prompt_set": self.prompt_set,
                "heads": self.heads}

    def tunable_named_parameters(self):
        for prefix, module in self.tunable_modules().items():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def tunable_parameter_tensors(self):
        return [p for _, p in self.tunable_named_parameters()]

    def tunable_parameters(self):
        """Descriptor list (name, shape, count) of every tunable parameter."""
        return [
            (name, tuple(p.shape), p.numel())
            for name, p in self.tunable_named_parameters()
        ]

    def parameter_counts(self):
        tunable = sum(p.numel() for p in self.tunable_parameter_tensors())
        frozen = sum(p.numel() for p in self.frozen.network.parameters())
        return {"tunable": tunable, "frozen": frozen,
                "ratio": tunable / (tunable + frozen)}

    def forward_one(self, x, k):
        """Class probabilities [B, C, H, W] using prompt/head k (1-based)."""
        if not 1 <= k <= self.num_prompts:
            raise InvalidArgumentError(f"k={k} outside 1..{self.num_prompts}")
        x = _to_batch(x)
        prompt = self.prompt_set.generate(k).expand(x.shape[0], -1, -1, -1)
        state = {"prompt": prompt}

        def hook(i, feature):
            new_feature, new_prompt = self.fpus[i](feature, state["prompt"])
            state["prompt"] = new_prompt
            return new_feature

        feats = self.frozen.network.forward_features(x, block_hook=hook)
        return torch.softmax(self.heads[k - 1](feats), dim=1)

    def forward_all(self, x):
        return [self.forward_one(x, k) for k in range(1, self.num_prompts + 1)]

    def forward(self, x):
        return self.forward_one(x, 1)

    def tunable_state_dict(self):
        return {prefix: module.state_dict()
                for prefix, module in self.tunable_modules().items()}

    def load_tunable_state_dict(self, state):
        for prefix, module in self.tunable_modules().items():
            module.load_state_dict(state[prefix])


def tunable_parameters(model: PromptedModel):
    return model.tunable_parameters()


def forward_one(model: PromptedModel, x, k):
    return model.forward_one(x, k)


def forward_all(model: PromptedModel, x):
    return model.forward_all(x)


def save_prompted_checkpoint(path, model: PromptedModel):
    """Store tunable tensors only, plus the frozen-backbone hash."""
    torch.save({
        "version": PROMPTED_CHECKPOINT_VERSION,
        "frozen_hash": model.frozen.weights_hash(),
        "num_prompts": model.num_prompts,
        "num_classes": model.num_classes,
        "meta_shape": tuple(model.prompt_set.meta.values.shape[2:]),
        "tunable_state": model.tunable_state_dict(),
    }, path)


def load_prompted_checkpoint(path, frozen: FrozenBackbone) -> PromptedModel:
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("version") != PROMPTED_CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ckpt.get('version')}")
    if ckpt["frozen_hash"] != frozen.weights_hash():
        raise CheckpointError("frozen backbone hash mismatch")
    prior = np.zeros((1, *ckpt["meta_shape"]), dtype=np.float32)
    prompt_set = PromptSet(prior, ckpt["num_prompts"])
    model = PromptedModel(frozen, prompt_set, ckpt["num_classes"])
    model.load_tunable_state_dict(ckpt["tunable_state"])
    return model


def frozen_state_fingerprint(model: PromptedModel):
    """Bitwise fingerprint of the frozen weights, for freeze-invariance checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.frozen.network.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
