"""Inference: 8-way flip test-time augmentation, per-voxel majority voting
with averaged-probability tie-breaking, and small-component postprocessing.

Everything here is tape-free numpy on frozen models. Masks flowing through
this module use internal labels 0..K-1; ``predict_case`` converts to the
external vocabulary {0, 1, 2, 4} at the very end.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import Tensor

# external BraTS-style label values, index = internal label
EXTERNAL_LABELS = np.array([0, 1, 2, 4], dtype=np.uint8)

# enhancing tumor is the only class cleaned by default; small spurious ET
# components cost disproportionately, the other classes keep everything
DEFAULT_ET_THRESHOLD = 50


def internal_to_external(mask):
    return EXTERNAL_LABELS[mask]


def external_to_internal(mask):
    lut = np.zeros(int(EXTERNAL_LABELS.max()) + 1, dtype=np.uint8)
    for internal, ext in enumerate(EXTERNAL_LABELS):
        lut[ext] = internal
    mask = np.asarray(mask)
    bad = ~np.isin(mask, EXTERNAL_LABELS)
    if bad.any():
        raise ValueError(
            f"mask contains labels outside {EXTERNAL_LABELS.tolist()}: "
            f"{sorted(np.unique(mask[bad]).tolist())}"
        )
    return lut[mask]


def flip_combos():
    """All 8 (flip-H, flip-W, flip-D) combinations, identity first."""
    return [c for c in itertools.product((False, True), repeat=3)]


def apply_flip(vol, combo):
    """Flip the trailing three (spatial) axes selected by ``combo``."""
    axes = [vol.ndim - 3 + i for i in range(3) if combo[i]]
    return np.flip(vol, axes) if axes else vol


def _model_probs(model, x4):
    scores = model.forward(Tensor(x4[None], dtype=getattr(model, "dtype", x4.dtype)))
    s = scores.data[0].astype(np.float64)
    s -= s.max(axis=0, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=0, keepdims=True)


def predict_probs(model, x):
    """Single-pass class probabilities (K, H, W, D) for input (C, H, W, D)."""
    return _model_probs(model, np.asarray(x))


def tta_predict(model, x):
    """Mean class probabilities over the 8 flip variants of the input.

    Each variant is flipped, pushed through the model, softmaxed, and
    un-flipped before averaging (in float64, so the average is invariant to
    the order the variants are visited in).
    """
    x = np.asarray(x)
    for ax in range(1, 4):
        if x.shape[ax] % 16:
            raise ValueError(
                f"tta_predict: spatial axis {ax} size {x.shape[ax]} "
                f"is not divisible by 16"
            )
    acc = None
    for combo in flip_combos():
        probs = _model_probs(model, np.ascontiguousarray(apply_flip(x, combo)))
        probs = apply_flip(probs, combo)
        acc = probs.copy() if acc is None else acc + probs
    return acc / 8.0


def majority_vote(masks, probs):
    """Per-voxel mode over model votes; ties go to the tied category with the
    largest averaged probability, then to the lowest label index."""
    if len(masks) == 0:
        raise ValueError("majority_vote: empty model list")
    if len(masks) != len(probs):
        raise ValueError("majority_vote: need one probability map per mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"majority_vote: mask shapes differ: {m.shape} vs {shape}")
    k = probs[0].shape[0]
    for p in probs:
        if p.shape != (k,) + shape:
            raise ValueError(
                f"majority_vote: probability map shape {p.shape} does not "
                f"match masks {(k,) + shape}"
            )
    votes = np.stack(masks)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(k)])
    tied = counts == counts.max(axis=0, keepdims=True)
    mean_probs = np.mean(np.stack(probs), axis=0)
    candidates = np.where(tied, mean_probs, -np.inf)
    # argmax takes the first maximum: the lowest tied label wins final ties
    return candidates.argmax(axis=0).astype(masks[0].dtype)


@dataclass
class PostprocConfig:
    """Minimum component volume per label value; labels absent keep everything."""

    thresholds: dict = field(default_factory=dict)
    strategy: str = "remove-component"
    fallback_class: int = 0
    semantics: str = "per-component"  # or "total-volume"

    def __post_init__(self):
        if self.strategy not in ("remove-component", "relabel-class"):
            raise ValueError(f"unknown postprocessing strategy {self.strategy!r}")
        if self.semantics not in ("per-component", "total-volume"):
            raise ValueError(f"unknown threshold semantics {self.semantics!r}")
        for c, t in self.thresholds.items():
            if t < 0:
                raise ValueError(f"negative threshold {t} for class {c}")


_CONN26 = np.ones((3, 3, 3), dtype=bool)


def volume_threshold_postprocess(mask, cfg):
    """Drop (or relabel) 26-connected components smaller than the threshold."""
    out = np.asarray(mask).copy()
    target = 0 if cfg.strategy == "remove-component" else cfg.fallback_class
    for cls, thr in cfg.thresholds.items():
        if thr <= 0:
            continue
        sel = out == cls
        if cfg.semantics == "total-volume":
            if 0 < sel.sum() < thr:
                out[sel] = target
            continue
        comp, n = ndimage.label(sel, structure=_CONN26)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel())
        small = np.flatnonzero(sizes < thr)
        small = small[small > 0]
        if small.size:
            out[np.isin(comp, small)] = target
    return out


@dataclass
class InferenceConfig:
    tta: bool = True
    postproc: PostprocConfig = field(default_factory=PostprocConfig)


def predict_case(models, x, cfg):
    """Full pipeline: per-model (TTA) probabilities, argmax masks, majority
    vote, postprocessing; returns a mask in the external label vocabulary."""
    if not models:
        raise ValueError("predict_case: empty model list")
    predict = tta_predict if cfg.tta else predict_probs
    probs = [predict(m, x) for m in models]
    masks = [p.argmax(axis=0) for p in probs]
    voted = majority_vote(masks, probs)
    cleaned = volume_threshold_postprocess(voted, cfg.postproc)
    return internal_to_external(cleaned)
