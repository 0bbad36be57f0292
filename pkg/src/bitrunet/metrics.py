"""Segmentation metrics over the three overlapping tumor regions.

Masks are in the external label vocabulary {0, 1, 2, 4}. Regions:
whole tumor {1, 2, 4}, tumor core {1, 4}, enhancing tumor {4}.

A surface voxel is a foreground voxel with at least one of its six axis
neighbors background, or lying on the volume boundary. HD95 pools the
nearest-surface distances from both directions into one set and takes the
95th percentile; a max-of-directed-percentiles variant sits behind a flag.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# one empty and one nonempty surface: distance is undefined, report this
HD95_EMPTY_SENTINEL = 373.1287


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: frozenset


REGIONS = (
    RegionSpec("WT", frozenset({1, 2, 4})),
    RegionSpec("TC", frozenset({1, 4})),
    RegionSpec("ET", frozenset({4})),
)


def region_mask(mask, region):
    """Boolean volume: voxel label belongs to the region's label set."""
    return np.isin(mask, sorted(region.labels))


def _check_shapes(pred, truth, what):
    if pred.shape != truth.shape:
        raise ValueError(f"{what}: shape mismatch {pred.shape} vs {truth.shape}")


def dice(pred, truth):
    """2|P∩T| / (|P|+|T|); both empty -> 1.0, exactly one empty -> 0.0."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    _check_shapes(pred, truth, "dice")
    p, t = int(pred.sum()), int(truth.sum())
    if p + t == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / (p + t)


def confusion_counts(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    _check_shapes(pred, truth, "confusion")
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    tn = pred.size - tp - fp - fn
    return tp, fp, tn, fn


def sensitivity(pred, truth):
    """TP / (TP + FN); defined as 1.0 when the truth is empty."""
    tp, _, _, fn = confusion_counts(pred, truth)
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def specificity(pred, truth):
    """TN / (TN + FP); defined as 1.0 when the truth covers everything."""
    _, fp, tn, _ = confusion_counts(pred, truth)
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


_CROSS6 = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask):
    """Foreground voxels with a 6-neighbor background or on the boundary."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS6, border_value=0)
    return mask & ~eroded


def hd95(pred, truth, spacing=(1.0, 1.0, 1.0), mode="pooled",
         empty_sentinel=HD95_EMPTY_SENTINEL):
    """95th percentile of surface-to-nearest-surface distances.

    Both empty -> 0.0; exactly one empty -> ``empty_sentinel``. ``mode``
    "pooled" merges both directed distance sets before the percentile;
    "directed-max" takes the max of the two directed 95th percentiles.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    _check_shapes(pred, truth, "hd95")
    if mode not in ("pooled", "directed-max"):
        raise ValueError(f"unknown hd95 mode {mode!r}")
    ps = surface_voxels(pred)
    ts = surface_voxels(truth)
    if not ps.any() and not ts.any():
        return 0.0
    if not ps.any() or not ts.any():
        return float(empty_sentinel)
    d_to_truth = ndimage.distance_transform_edt(~ts, sampling=spacing)[ps]
    d_to_pred = ndimage.distance_transform_edt(~ps, sampling=spacing)[ts]
    if mode == "pooled":
        return float(np.percentile(np.concatenate([d_to_truth, d_to_pred]), 95))
    return float(
        max(np.percentile(d_to_truth, 95), np.percentile(d_to_pred, 95))
    )


def evaluate_case(pred_mask, truth_mask, spacing=(1.0, 1.0, 1.0)):
    """Per-region dice, hd95, sensitivity and specificity for one case."""
    out = {}
    for region in REGIONS:
        p = region_mask(pred_mask, region)
        t = region_mask(truth_mask, region)
        out[region.name] = {
            "dice": dice(p, t),
            "hd95": hd95(p, t, spacing),
            "sensitivity": sensitivity(p, t),
            "specificity": specificity(p, t),
        }
    return out


SUMMARY_STATS = ("mean", "sd", "median", "p25", "p75")


def summarize(values):
    """Mean, population sd, median and quartiles (linear interpolation)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("summarize: no values")
    return {
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=0)),
        "median": float(np.percentile(v, 50)),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
    }


METRIC_NAMES = ("dice", "hd95", "sensitivity", "specificity")


def format_report(case_results):
    """Tab-separated evaluation report plus a summary statistics block.

    ``case_results`` maps case id -> region -> metric -> value.
    """
    lines = ["case\tregion\tdice\thd95\tsensitivity\tspecificity"]
    for case_id in sorted(case_results):
        for region in REGIONS:
            m = case_results[case_id][region.name]
            lines.append(
                f"{case_id}\t{region.name}\t{m['dice']:.6f}\t{m['hd95']:.6f}"
                f"\t{m['sensitivity']:.6f}\t{m['specificity']:.6f}"
            )
    lines.append("")
    lines.append("summary\tregion\tmetric\t" + "\t".join(SUMMARY_STATS))
    for region in REGIONS:
        for metric in METRIC_NAMES:
            stats = summarize(
                case_results[cid][region.name][metric] for cid in case_results
            )
            vals = "\t".join(f"{stats[s]:.6f}" for s in SUMMARY_STATS)
            lines.append(f"summary\t{region.name}\t{metric}\t{vals}")
    return "\n".join(lines) + "\n"
