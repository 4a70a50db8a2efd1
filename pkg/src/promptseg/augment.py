"""Per-branch data augmentation: scale, rotation, mirror, elastic.

Images are resampled bilinearly, masks with nearest-neighbor so no new labels
appear.  Each branch strength tier draws from wider parameter ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import InvalidArgumentError

STRENGTH_TIERS = {
    "light": {"scale": 0.05, "rotation": 10.0, "mirror": False, "elastic": False},
    "medium": {"scale": 0.10, "rotation": 20.0, "mirror": True, "elastic": False},
    "heavy": {"scale": 0.15, "rotation": 30.0, "mirror": True, "elastic": True},
}

_ELASTIC_ALPHA = 4.0
_ELASTIC_SIGMA = 6.0


@dataclass
class AugmentParams:
    scale: float = 1.0
    rotation_deg: float = 0.0
    mirror: bool = False
    displacement: object = None  # pair of [H,W] arrays, or None

    def is_identity(self):
        return (not self.mirror and self.displacement is None
                and self.rotation_deg == 0.0 and self.scale == 1.0)


def sample_augment_params(strength, seed, shape):
    """Draw transform parameters for one branch tier, deterministic in seed."""
    if strength not in STRENGTH_TIERS:
        raise InvalidArgumentError(f"unknown augmentation strength {strength!r}")
    tier = STRENGTH_TIERS[strength]
    rng = np.random.default_rng([int(seed), 0xA06])
    scale = float(rng.uniform(1.0 - tier["scale"], 1.0 + tier["scale"]))
    rotation = float(rng.uniform(-tier["rotation"], tier["rotation"]))
    mirror = bool(tier["mirror"] and rng.random() < 0.5)
    displacement = None
    if tier["elastic"]:
        fields = [
            ndi.gaussian_filter(rng.uniform(-1, 1, shape), _ELASTIC_SIGMA)
            for _ in range(2)
        ]
        displacement = tuple(_ELASTIC_ALPHA * f for f in fields)
    return AugmentParams(scale=scale, rotation_deg=rotation, mirror=mirror,
                         displacement=displacement)


def _affine(arr, params, order):
    h, w = arr.shape
    theta = np.deg2rad(params.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    # output->input map: inverse of (rotate then scale)
    matrix = rot.T / params.scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return ndi.affine_transform(arr, matrix, offset=offset, order=order,
                                mode="reflect")


def _elastic(arr, displacement, order):
    h, w = arr.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + displacement[0], xx + displacement[1]])
    return ndi.map_coordinates(arr, coords, order=order, mode="reflect")


def augment_with_params(image, mask, params: AugmentParams):
    """Apply one transform jointly to image [C,H,W] and mask [H,W]."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[1:] != mask.shape:
        raise InvalidArgumentError("image/mask spatial shapes disagree")
    if params.is_identity():
        return image.copy(), mask.copy()

    out_img = image.astype(np.float64, copy=True)
    out_mask = mask.copy()
    if params.mirror:
        out_img = out_img[:, :, ::-1].copy()
        out_mask = out_mask[:, ::-1].copy()
    if params.rotation_deg != 0.0 or params.scale != 1.0:
        out_img = np.stack([_affine(c, params, order=1) for c in out_img])
        out_mask = _affine(out_mask, params, order=0)
    if params.displacement is not None:
        out_img = np.stack(
            [_elastic(c, params.displacement, order=1) for c in out_img]
        )
        out_mask = _elastic(out_mask, params.displacement, order=0)
    return out_img.astype(image.dtype, copy=False), out_mask.astype(mask.dtype)


def augment(image, mask, branch, seed):
    """Sample the branch's tier and apply it; deterministic in seed."""
    params = sample_augment_params(branch.aug_strength, seed,
                                   np.asarray(mask).shape)
    return augment_with_params(image, mask, params)
