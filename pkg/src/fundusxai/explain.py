"""Attention maps, attention/anatomy alignment and region-masking experiments.

Grad-CAM weights each final conv feature map by the spatial mean of the
task logit's gradient w.r.t. that map, sums, rectifies, upsamples to input
resolution and min-max normalizes to [0, 1]. Alignment against anatomy uses
plain binary IoU after thresholding the normalized map. Region masking
replaces an anatomical region with a fill colour and measures the AUC drop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import imaging, vesselseg
from .cohort import TASKS
from .metrics import SingleClassError, roc_auc
from .model import MultiTaskCNN
from .training import predict_probs

MASKING_REGIONS = ("vessel", "optic_disc", "macula", "background")
CONTROL_REGION = "none"
VESSEL_MASK_DILATE_PX = 2


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMap:
    task: str
    values: np.ndarray          # (H, W) in [0, 1]
    degenerate: bool


def grad_cam(model: MultiTaskCNN, cache: dict, task: str) -> AttentionMap:
    """Attention map for one task from a cached single-image eval forward."""
    if cache["training"]:
        raise ValueError("grad_cam needs an eval-mode forward cache")
    if cache["logits"].shape[0] != 1:
        raise ValueError("grad_cam operates on a single-image cache")
    dfeat = model.feature_gradient(cache, task)[0]     # (C, fh, fw)
    feat = cache["feat"][0]
    alphas = dfeat.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alphas, feat, axes=1), 0.0)
    in_h, in_w = cache["input"].shape[2:]
    up = imaging.resample_bilinear(raw, in_h, in_w)
    lo, hi = float(up.min()), float(up.max())
    if hi == lo:
        return AttentionMap(task, np.zeros((in_h, in_w)), True)
    return AttentionMap(task, (up - lo) / (hi - lo), False)


def compute_attention(model: MultiTaskCNN, tensor: np.ndarray, task: str) -> AttentionMap:
    """Eval forward on one (3, H, W) tensor followed by :func:`grad_cam`."""
    model.eval()
    cache, _ = model.forward(tensor[None])
    return grad_cam(model, cache, task)


def threshold_attention(attention: AttentionMap, tau: float = 0.5) -> np.ndarray:
    """Binary high-importance mask: attention >= tau (degenerate maps give
    an empty mask for any tau > 0)."""
    return (attention.values >= tau).astype(np.uint8)


def mask_iou(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Intersection-over-union of two binary masks.

    Returns ``(iou, both_empty)``; two empty masks score 0 with the flag set.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a > 0
    b = b > 0
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0, True
    inter = int(np.logical_and(a, b).sum())
    return inter / union, False


# ---------------------------------------------------------------------------
# region masking


@dataclass(frozen=True)
class RegionSpec:
    region_id: str
    mask: np.ndarray
    source: str = "ground_truth"        # or "estimated"
    fill: tuple[int, int, int] | None = None   # None: per-image in-FOV mean
    dilate_px: int = 0


def region_fill_value(img: np.ndarray) -> tuple[int, int, int]:
    """Per-channel mean of the in-FOV pixels, rounded to uint8."""
    fov, _, _ = vesselseg.estimate_fov(img)
    sel = fov.astype(bool)
    means = img[sel].astype(np.float64).mean(axis=0)
    return tuple(int(v) for v in np.clip(np.rint(means), 0, 255))


def mask_region(img: np.ndarray, region: RegionSpec) -> np.ndarray:
    """Replace the region's pixels with the fill colour, leave the rest."""
    img = np.asarray(img)
    if region.mask.shape != img.shape[:2]:
        raise DimMismatch(f"region mask {region.mask.shape} vs image {img.shape[:2]}")
    mask = region.mask
    if region.dilate_px > 0:
        mask = vesselseg.dilate_mask(mask, region.dilate_px)
    fill = region.fill if region.fill is not None else region_fill_value(img)
    out = img.copy()
    out[mask > 0] = np.asarray(fill, dtype=img.dtype)
    return out


def build_region_specs(masks: dict[str, np.ndarray], source: str) -> list[RegionSpec]:
    """Standard per-image region list: empty control plus the four regions.

    The vessel region is pre-dilated so the fill covers vessel borders.
    """
    h, w = masks[MASKING_REGIONS[0]].shape
    specs = [RegionSpec(CONTROL_REGION, np.zeros((h, w), dtype=np.uint8), source)]
    for region in MASKING_REGIONS:
        dilate = VESSEL_MASK_DILATE_PX if region == "vessel" else 0
        specs.append(RegionSpec(region, masks[region], source, dilate_px=dilate))
    return specs


@dataclass
class MaskingReport:
    rows: list[dict] = field(default_factory=list)
    region_source: str = "ground_truth"

    HEADER = ("task", "region", "auc_baseline", "auc_masked", "delta", "n")

    def append(self, task, region, auc_baseline, auc_masked, n) -> None:
        delta = auc_baseline - auc_masked
        self.rows.append({"task": task, "region": region, "auc_baseline": auc_baseline,
                          "auc_masked": auc_masked, "delta": delta, "n": n})

    def delta(self, task: str, region: str) -> float:
        for row in self.rows:
            if row["task"] == task and row["region"] == region:
                return row["delta"]
        raise KeyError((task, region))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for row in self.rows:
                writer.writerow([row[k] for k in self.HEADER])


def _task_auc_or_nan(labels, probs, t):
    sel = ~np.isnan(labels[:, t])
    if sel.sum() == 0:
        return float("nan"), 0
    try:
        return roc_auc(labels[sel, t].astype(np.int64), probs[sel, t]), int(sel.sum())
    except SingleClassError:
        return float("nan"), int(sel.sum())


def masking_experiment(model: MultiTaskCNN,
                       images: np.ndarray, labels: np.ndarray,
                       region_masks: list[dict[str, np.ndarray]],
                       region_source: str = "ground_truth",
                       norm_stats: imaging.NormStats = imaging.NormStats()) -> MaskingReport:
    """Baseline vs region-masked AUC per task.

    ``region_masks[i]`` holds the four region masks of image ``i``. The empty
    control region is always evaluated first; its delta is exactly 0 because
    the masked images are bit-identical to the baseline.
    """
    if images.shape[0] == 0:
        raise ValueError("empty evaluation set")
    tensors = np.stack([imaging.to_tensor_normalized(im, norm_stats) for im in images])
    base_probs = predict_probs(model, tensors)

    report = MaskingReport(region_source=region_source)
    fills = [region_fill_value(im) for im in images]
    for region in (CONTROL_REGION,) + MASKING_REGIONS:
        masked_tensors = np.empty_like(tensors)
        for i in range(images.shape[0]):
            if region == CONTROL_REGION:
                masked = images[i]
            else:
                spec = RegionSpec(region, region_masks[i][region], region_source,
                                  fill=fills[i],
                                  dilate_px=VESSEL_MASK_DILATE_PX if region == "vessel" else 0)
                masked = mask_region(images[i], spec)
            masked_tensors[i] = imaging.to_tensor_normalized(masked, norm_stats)
        probs = predict_probs(model, masked_tensors)
        for t, task in enumerate(TASKS):
            base_auc, n = _task_auc_or_nan(labels, base_probs, t)
            masked_auc, _ = _task_auc_or_nan(labels, probs, t)
            report.append(task, region, base_auc, masked_auc, n)
    return report


# ---------------------------------------------------------------------------
# overlays and attention persistence


def _jet(values: np.ndarray) -> np.ndarray:
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(img: np.ndarray, attention: AttentionMap, alpha: float = 0.4) -> np.ndarray:
    """Blend a jet-coloured attention map over the image.

    The blend weight is alpha * attention, so zero attention leaves pixels
    untouched and a degenerate map returns the input image exactly.
    """
    img = np.asarray(img)
    if attention.values.shape != img.shape[:2]:
        raise DimMismatch(f"attention {attention.values.shape} vs image {img.shape[:2]}")
    weight = (alpha * attention.values)[..., None]
    colours = _jet(attention.values) * 255.0
    out = (1.0 - weight) * img.astype(np.float64) + weight * colours
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_attention(path_base, attention: AttentionMap) -> None:
    """8-bit PNG preview plus a float32 .npy sidecar for exact reload."""
    arr = np.clip(np.rint(255.0 * attention.values), 0, 255).astype(np.uint8)
    from PIL import Image

    Image.fromarray(arr, "L").save(str(path_base) + ".png")
    np.save(str(path_base) + ".npy", attention.values.astype(np.float32))


def load_attention(path_base, task: str = "") -> AttentionMap:
    values = np.load(str(path_base) + ".npy").astype(np.float64)
    degenerate = float(values.max()) == float(values.min()) == 0.0
    return AttentionMap(task, values, degenerate)


# ---------------------------------------------------------------------------
# estimated regions for images without ground-truth anatomy


def estimate_regions(img: np.ndarray,
                     seg_params: vesselseg.SegParams = vesselseg.SegParams(),
                     disc_radius_frac: float = 0.075,
                     macula_radius_frac: float = 0.09,
                     macula_offset_frac: float = 0.30) -> dict[str, np.ndarray]:
    """Region masks estimated from the image itself.

    Vessels come from the classical segmenter, the optic disc from a
    brightest-disk search, the macula from a circle at a fixed offset from
    the disc toward the frame center, the background is the complement.
    """
    from scipy import ndimage

    img = np.asarray(img)
    h, w = img.shape[:2]
    size = min(h, w)
    vessel = vesselseg.segment_vessels(img, seg_params)

    fov, (cy, cx), _ = vesselseg.estimate_fov(img)
    gray = img.astype(np.float64).mean(axis=2)
    r_disc = max(2, int(round(disc_radius_frac * size)))
    fp = vesselseg.disk_footprint(r_disc).astype(np.float64)
    response = ndimage.correlate(gray, fp / fp.sum(), mode="nearest")
    response[fov == 0] = -np.inf
    dy, dx = np.unravel_index(int(np.argmax(response)), response.shape)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    disc = ((ys - dy) ** 2 + (xs - dx) ** 2 <= r_disc ** 2) & fov.astype(bool)

    direction = np.array([cy - dy, cx - dx], dtype=np.float64)
    norm = np.hypot(*direction)
    direction = direction / norm if norm > 0 else np.array([0.0, -1.0])
    my, mx = np.array([dy, dx]) + direction * macula_offset_frac * size
    r_mac = max(2, int(round(macula_radius_frac * size)))
    macula = ((ys - my) ** 2 + (xs - mx) ** 2 <= r_mac ** 2) & fov.astype(bool)

    vessel_b = vessel.astype(bool)
    disc_b = disc & ~vessel_b
    macula_b = macula & ~vessel_b & ~disc_b
    background = ~(vessel_b | disc_b | macula_b)
    return {"vessel": vessel_b.astype(np.uint8), "optic_disc": disc_b.astype(np.uint8),
            "macula": macula_b.astype(np.uint8), "background": background.astype(np.uint8)}
