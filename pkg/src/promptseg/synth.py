"""Deterministic synthetic organ/lesion segmentation cases.

Two generators: a binary "organ" task used for supervised pretraining, and a
multi-class "lesion" task (lesions placed strictly inside the organ, with a
skewed class-frequency profile) used as the downstream pool.  Both are pure
functions of their seed, so any case can be regenerated bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .errors import InvalidArgumentError, UnlabeledAccessError

# rng stream tags, so pretrain / downstream draws never collide for equal seeds
_PRETRAIN_STREAM = 0x5EED
_DOWNSTREAM_STREAM = 0xD05E

_MIN_SIZE = 32


@dataclass(frozen=True)
class Case:
    """One image/mask pair.  image is [1, H, W] in [0,1], mask is [H, W] ints."""

    image: np.ndarray
    mask: np.ndarray
    case_id: str
    seed: int


@dataclass(frozen=True)
class LesionProfile:
    """Sampling profile for the downstream lesion classes (labels 1..L)."""

    frequencies: tuple = (0.45, 0.45, 0.10)
    radius_ranges: tuple = ((5.0, 9.0), (3.0, 6.0), (2.0, 4.5))
    contrasts: tuple = (0.30, -0.22, 0.45)
    max_lesions: int = 4

    def __post_init__(self):
        if len(self.frequencies) < 2:
            raise InvalidArgumentError("profile needs at least 2 lesion classes")
        if any(f < 0 for f in self.frequencies):
            raise InvalidArgumentError("lesion class frequency < 0")
        if abs(sum(self.frequencies) - 1.0) > 1e-6:
            raise InvalidArgumentError("lesion class frequencies must sum to 1")
        if not (len(self.frequencies) == len(self.radius_ranges) == len(self.contrasts)):
            raise InvalidArgumentError("profile field lengths disagree")

    @property
    def num_classes(self):
        """Total label count including background."""
        return len(self.frequencies) + 1


DEFAULT_PROFILE = LesionProfile()


@dataclass
class Pool:
    """Ordered case collection with label-availability flags.

    Mask access for unlabeled cases goes through :meth:`visible_mask`, which
    raises, so no training code can touch ground truth before the oracle
    reveals it.
    """

    cases: list
    num_classes: int
    labeled: set = field(default_factory=set)

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("duplicate case_ids in pool")
        if not all(0 <= i < len(self.cases) for i in self.labeled):
            raise InvalidArgumentError("labeled indices out of range")

    def __len__(self):
        return len(self.cases)

    def unlabeled_indices(self):
        return [i for i in range(len(self.cases)) if i not in self.labeled]

    def label(self, indices):
        """Mark indices as labeled.  Re-labeling an index is an error."""
        indices = list(indices)
        for i in indices:
            if not 0 <= i < len(self.cases):
                raise InvalidArgumentError(f"index {i} out of range")
            if i in self.labeled:
                raise InvalidArgumentError(f"index {i} is already labeled")
        self.labeled.update(indices)

    def visible_mask(self, index):
        if index not in self.labeled:
            raise UnlabeledAccessError(
                f"mask of case index {index} read before labeling"
            )
        return self.cases[index].mask

    def labeled_items(self):
        """(image, mask) pairs for the labeled cases, in index order."""
        return [
            (self.cases[i].image, self.visible_mask(i)) for i in sorted(self.labeled)
        ]

    def clone(self):
        return Pool(cases=self.cases, num_classes=self.num_classes,
                    labeled=set(self.labeled))


def _smooth_field(rng, size, sigma):
    return ndi.gaussian_filter(rng.standard_normal(size), sigma, mode="reflect")


def _largest_component(binary):
    labels, n = ndi.label(binary)
    if n == 0:
        return None
    counts = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(counts)) + 1)


def _blob_mask(rng, size, frac_range, sigma_frac, max_tries=25):
    """Single connected blob whose area fraction lands inside frac_range."""
    h, w = size
    lo, hi = frac_range
    margin = 0.1 * (hi - lo)
    for _ in range(max_tries):
        target = rng.uniform(lo + margin, hi - margin)
        fld = _smooth_field(rng, size, sigma=min(h, w) * sigma_frac)
        thr = np.quantile(fld, 1.0 - target)
        blob = _largest_component(fld > thr)
        if blob is None:
            continue
        frac = blob.mean()
        if lo <= frac <= hi:
            return blob
    # degenerate rng stream; fall back to a centered disk of mid-range area
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt(0.5 * (lo + hi) * h * w / np.pi)
    return ((yy - h / 2) ** 2 + (xx - w / 2) ** 2) <= r**2


def _validate_size(size):
    h, w = size
    if h < _MIN_SIZE or w < _MIN_SIZE:
        raise InvalidArgumentError(f"size {size} below minimum {_MIN_SIZE}")
    return int(h), int(w)


def gen_pretrain_case(seed, size=(64, 64)):
    """Binary organ case: one smooth blob covering 10-40% of the image."""
    h, w = _validate_size(size)
    rng = np.random.default_rng([int(seed), _PRETRAIN_STREAM])
    blob = _blob_mask(rng, (h, w), (0.10, 0.40), sigma_frac=0.125)
    texture = _smooth_field(rng, (h, w), 2.0)
    noise = rng.standard_normal((h, w))
    image = 0.20 + 0.50 * blob + 0.10 * texture + 0.02 * noise
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return Case(image=image, mask=blob.astype(np.int64),
                case_id=f"organ-{int(seed):08d}", seed=int(seed))


def _organ_from_rng(rng, size):
    return _blob_mask(rng, size, (0.25, 0.55), sigma_frac=0.16)


def downstream_organ_support(seed, size=(64, 64)):
    """Organ support of the downstream case with the same seed."""
    h, w = _validate_size(size)
    rng = np.random.default_rng([int(seed), _DOWNSTREAM_STREAM])
    return _organ_from_rng(rng, (h, w))


def gen_downstream_case(seed, size=(64, 64), profile=DEFAULT_PROFILE):
    """Multi-class lesion case: organ blob plus 0-4 in-organ lesions.

    Lesion classes are drawn from the profile's frequencies; sizes and
    contrasts are class-dependent.  Texture/noise parameters differ from the
    pretraining generator, giving the downstream distribution shift.
    """
    h, w = _validate_size(size)
    rng = np.random.default_rng([int(seed), _DOWNSTREAM_STREAM])
    organ = _organ_from_rng(rng, (h, w))
    interior = ndi.distance_transform_edt(organ)

    mask = np.zeros((h, w), dtype=np.int64)
    delta = np.zeros((h, w), dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    n_lesions = int(rng.integers(0, profile.max_lesions + 1))
    for _ in range(n_lesions):
        cls = int(rng.choice(len(profile.frequencies), p=profile.frequencies))
        r_lo, r_hi = profile.radius_ranges[cls]
        radius = float(rng.uniform(r_lo, r_hi))
        valid = interior > radius + 1.0
        while not valid.any() and radius > 1.5:
            radius *= 0.7
            valid = interior > radius + 1.0
        if not valid.any():
            continue
        flat = np.flatnonzero(valid)
        cy, cx = np.unravel_index(flat[int(rng.integers(len(flat)))], (h, w))
        ecc = float(rng.uniform(0.6, 1.0))
        lesion = (((yy - cy) / radius) ** 2 + ((xx - cx) / (radius * ecc)) ** 2) <= 1.0
        lesion &= organ
        mask[lesion] = cls + 1
        delta[lesion] = profile.contrasts[cls]

    image = (0.12 + 0.42 * organ + delta
             + 0.08 * _smooth_field(rng, (h, w), 3.0)
             + 0.03 * rng.standard_normal((h, w)))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return Case(image=image, mask=mask,
                case_id=f"lesion-{int(seed):08d}", seed=int(seed))


def case_seed_stream(seed, n, salt=0):
    """n distinct deterministic per-case seeds derived from a pool seed."""
    ss = np.random.SeedSequence([int(seed), int(salt)])
    return [int(s) for s in ss.generate_state(n) % (2**31)]


def build_pool(n, seed, profile=DEFAULT_PROFILE, size=(64, 64)):
    """Pool of n downstream cases, nothing labeled."""
    if n < 1:
        raise InvalidArgumentError("pool size must be >= 1")
    seeds = case_seed_stream(seed, n)
    cases = [gen_downstream_case(s, size=size, profile=profile) for s in seeds]
    return Pool(cases=cases, num_classes=profile.num_classes)


def _overlap_weights(n_in, n_out):
    # row i holds the fractional coverage of input cells by output cell i
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
        w[i] /= scale
    return w


def area_resample(arr, out_shape):
    """Mass-preserving area-average resampling of a 2D array."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError("area_resample expects a 2D array")
    wr = _overlap_weights(arr.shape[0], out_shape[0])
    wc = _overlap_weights(arr.shape[1], out_shape[1])
    return wr @ arr @ wc.T


def foreground_prior(masks, target_shape):
    """Mean of binarized masks (any class > 0), resampled to target_shape.

    Returns a [1, H', W'] array in [0, 1].
    """
    masks = list(masks)
    if not masks:
        raise InvalidArgumentError("foreground_prior needs at least one mask")
    shape = np.asarray(masks[0]).shape
    for m in masks:
        if np.asarray(m).shape != shape:
            raise InvalidArgumentError("masks must share a common shape")
    fg = np.mean([(np.asarray(m) > 0).astype(np.float64) for m in masks], axis=0)
    prior = area_resample(fg, target_shape)
    return np.clip(prior, 0.0, 1.0)[None]


def save_pool(pool, directory):
    """Persist a pool as per-case .npz files plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in pool.cases:
        fname = f"{case.case_id}.npz"
        np.savez(directory / fname, image=case.image, mask=case.mask)
        entries.append({"case_id": case.case_id, "seed": case.seed, "file": fname})
    class_table = {"0": "background"}
    for c in range(1, pool.num_classes):
        class_table[str(c)] = f"lesion_type_{c}"
    manifest = {
        "format": "promptseg-pool-v1",
        "num_classes": pool.num_classes,
        "class_table": class_table,
        "labeled": sorted(pool.labeled),
        "cases": entries,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_pool(directory):
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "promptseg-pool-v1":
        raise InvalidArgumentError("unrecognized pool manifest format")
    cases = []
    for entry in manifest["cases"]:
        with np.load(directory / entry["file"]) as data:
            cases.append(Case(image=data["image"], mask=data["mask"],
                              case_id=entry["case_id"], seed=entry["seed"]))
    return Pool(cases=cases, num_classes=manifest["num_classes"],
                labeled=set(manifest["labeled"]))
