"""Procedural fundus-like phantom generator with ground-truth anatomy.

Renders an orange circular retina on a black surround with a bright optic
disc, a darker macula and a recursively branching dark vessel tree rooted at
the disc. Label coupling is planted deliberately:

- kidney = 1 widens the vessel tree (base width x1.4) and increases its
  tortuosity amplitude (x1.5);
- the extra "multi" trait darkens the macula by 20%;
- the hba1c label is never read during rendering, so it has no image
  correlate at all.

The composite multi label is kidney OR extra-trait. Ground-truth masks are
pixel-exact for the drawn geometry and partition the frame with priority
vessel > optic_disc > macula > background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import imaging
from .cohort import ImageRecord, write_manifest

REGIONS = ("vessel", "optic_disc", "macula", "background")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and appearance of a single phantom; positions and radii are
    normalized by the frame size."""

    image_size: int = 224
    fov_radius: float = 0.48
    disc_center: tuple[float, float] = (0.70, 0.50)   # (x, y)
    disc_radius: float = 0.075
    macula_center: tuple[float, float] = (0.40, 0.50)
    macula_radius: float = 0.09
    vessel_branches: int = 6
    vessel_base_width: float = 0.018     # fraction of frame size
    vessel_depth: int = 4
    tortuosity_amp: float = 0.35         # heading oscillation, radians
    branch_angle_deg: float = 26.0
    background_tint: tuple[int, int, int] = (205, 120, 62)
    disc_tint: tuple[int, int, int] = (248, 214, 150)
    vessel_tint: tuple[int, int, int] = (92, 32, 26)
    macula_darken: float = 0.55
    noise_sigma: float = 8.0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size too small")
        if self.disc_radius <= 0 or self.macula_radius <= 0:
            raise ValueError("radii must be positive")
        for cx, cy, r in ((*self.disc_center, self.disc_radius),
                          (*self.macula_center, self.macula_radius)):
            d = np.hypot(cx - 0.5, cy - 0.5)
            if d + r > self.fov_radius:
                raise ValueError("disc and macula must sit inside the field of view")


@dataclass(frozen=True)
class CohortSpec:
    """Synthetic cohort layout; prevalences default to a realistic mix of a
    common, a moderate and a rarer abnormality; the extra-trait prevalence is
    tuned so that P(kidney OR extra) comes out near 0.358."""

    n_subjects: int = 400
    images_per_subject: int = 3
    prevalence_hba1c: float = 0.852
    prevalence_kidney: float = 0.218
    prevalence_multi_extra: float = 0.179
    image_size: int = 224
    seed: int = 42

    def __post_init__(self):
        for p in (self.prevalence_hba1c, self.prevalence_kidney, self.prevalence_multi_extra):
            if not 0.0 <= p <= 1.0:
                raise ValueError("prevalences must lie in [0, 1]")
        if self.n_subjects < 1 or self.images_per_subject < 1:
            raise ValueError("counts must be >= 1")


def _paint_polyline(mask: np.ndarray, points: np.ndarray, width: float) -> None:
    """Stamp disks of diameter ``width`` along the points into a boolean mask."""
    h, w = mask.shape
    r = width / 2.0
    ri = int(np.ceil(r))
    for py, px in points:
        y0, y1 = int(np.floor(py)) - ri, int(np.floor(py)) + ri + 1
        x0, x1 = int(np.floor(px)) - ri, int(np.floor(px)) + ri + 1
        y0c, y1c = max(y0, 0), min(y1, h)
        x0c, x1c = max(x0, 0), min(x1, w)
        if y0c >= y1c or x0c >= x1c:
            continue
        ys = np.arange(y0c, y1c, dtype=np.float64)[:, None]
        xs = np.arange(x0c, x1c, dtype=np.float64)[None, :]
        mask[y0c:y1c, x0c:x1c] |= ((ys - py) ** 2 + (xs - px) ** 2) <= r * r


def _grow_vessels(spec: PhantomSpec, kidney: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize the branching vessel tree into a boolean mask."""
    n = spec.image_size
    mask = np.zeros((n, n), dtype=bool)
    width0 = spec.vessel_base_width * n * (1.4 if kidney else 1.0)
    amp = spec.tortuosity_amp * (1.5 if kidney else 1.0)
    origin = np.array([spec.disc_center[1] * (n - 1), spec.disc_center[0] * (n - 1)])
    base_len = 0.34 * n

    root_angles = np.linspace(0.0, 2.0 * np.pi, spec.vessel_branches, endpoint=False)
    root_angles = root_angles + rng.uniform(-0.25, 0.25, size=spec.vessel_branches)

    # (start_y, start_x, heading, depth) stack; each segment wiggles with a
    # sinusoidal heading perturbation then splits in two
    stack = [(origin[0], origin[1], float(a), 0) for a in root_angles]
    while stack:
        sy, sx, heading, depth = stack.pop()
        seg_len = base_len * (0.80 ** depth)
        width = width0 * (0.74 ** depth)
        freq = rng.uniform(1.2, 2.4)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        steps = max(4, int(seg_len / 0.5))
        ts = np.arange(1, steps + 1) / steps
        headings = heading + amp * np.sin(2.0 * np.pi * freq * ts + phase)
        step_len = seg_len / steps
        ys = sy + np.cumsum(step_len * np.sin(headings))
        xs = sx + np.cumsum(step_len * np.cos(headings))
        _paint_polyline(mask, np.column_stack([ys, xs]), width)
        if depth + 1 < spec.vessel_depth:
            split = np.deg2rad(spec.branch_angle_deg) * (0.7 + 0.6 * rng.random())
            end_heading = float(headings[-1])
            stack.append((float(ys[-1]), float(xs[-1]), end_heading + split, depth + 1))
            stack.append((float(ys[-1]), float(xs[-1]), end_heading - split, depth + 1))
    return mask


def render_fundus(spec: PhantomSpec, labels: dict, rng: np.random.Generator):
    """Render one phantom; returns ``(image, masks)``.

    ``labels`` needs keys ``kidney`` and ``extra`` (hba1c is intentionally
    ignored). ``masks`` maps each region name to a uint8 {0, 1} array; the
    four regions are pairwise disjoint and cover the frame.
    """
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = cx = (n - 1) / 2.0
    dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    fov = dist <= spec.fov_radius * n

    def circle(center, radius):
        ccy, ccx = center[1] * (n - 1), center[0] * (n - 1)
        return (ys - ccy) ** 2 + (xs - ccx) ** 2 <= (radius * n) ** 2

    disc = circle(spec.disc_center, spec.disc_radius) & fov
    macula = circle(spec.macula_center, spec.macula_radius) & fov
    vessels = _grow_vessels(spec, int(labels["kidney"]), rng) & fov

    # image assembly: radial shading on the retina tint, then anatomy layers
    img = np.zeros((n, n, 3), dtype=np.float64)
    shade = 1.0 - 0.22 * (dist / (spec.fov_radius * n)) ** 2
    tint = np.asarray(spec.background_tint, dtype=np.float64)
    img[fov] = shade[fov, None] * tint[None, :]

    macula_factor = spec.macula_darken * (0.8 if labels.get("extra") else 1.0)
    img[macula] *= macula_factor
    img[disc] = np.asarray(spec.disc_tint, dtype=np.float64)
    img[vessels] = np.asarray(spec.vessel_tint, dtype=np.float64)

    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=(n, n, 3))
        img[fov] += noise[fov]
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    vessel_m = vessels
    disc_m = disc & ~vessel_m
    macula_m = macula & ~vessel_m & ~disc_m
    background_m = ~(vessel_m | disc_m | macula_m)
    masks = {
        "vessel": vessel_m.astype(np.uint8),
        "optic_disc": disc_m.astype(np.uint8),
        "macula": macula_m.astype(np.uint8),
        "background": background_m.astype(np.uint8),
    }
    return img, masks


def draw_subject_labels(spec: CohortSpec, subject_index: int) -> dict:
    """Per-subject label draw; all images of a subject share these."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, subject_index, 11]))
    hba1c = int(rng.random() < spec.prevalence_hba1c)
    kidney = int(rng.random() < spec.prevalence_kidney)
    extra = int(rng.random() < spec.prevalence_multi_extra)
    return {"hba1c": hba1c, "kidney": kidney, "extra": extra,
            "multi": int(kidney or extra)}


def image_stem(subject_index: int, visit_index: int) -> str:
    return f"subj{subject_index:04d}_v{visit_index}"


def mask_path(cohort_dir, image_path: str, region: str) -> Path:
    stem = Path(image_path).stem
    return Path(cohort_dir) / "masks" / f"{stem}_{region}.png"


def sidecar_path(cohort_dir, image_path: str) -> Path:
    return Path(cohort_dir) / "sidecars" / f"{Path(image_path).stem}.json"


def load_ground_truth_masks(cohort_dir, image_path: str) -> dict[str, np.ndarray]:
    return {region: imaging.read_mask(mask_path(cohort_dir, image_path, region))
            for region in REGIONS}


def generate_cohort(spec: CohortSpec, out_dir,
                    phantom: PhantomSpec | None = None) -> list[ImageRecord]:
    """Generate images, masks, sidecars and the manifest for a full cohort.

    Every image derives its RNG stream from (seed, subject, visit), so
    output bytes are independent of generation order.
    """
    out_dir = Path(out_dir)
    if phantom is None:
        phantom = PhantomSpec(image_size=spec.image_size)
    elif phantom.image_size != spec.image_size:
        raise ValueError("phantom image_size must match cohort image_size")

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    (out_dir / "sidecars").mkdir(exist_ok=True)

    records: list[ImageRecord] = []
    for s in range(spec.n_subjects):
        labels = draw_subject_labels(spec, s)
        for v in range(spec.images_per_subject):
            stem = image_stem(s, v)
            rel = f"images/{stem}.png"
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, s, v, 13]))
            img, masks = render_fundus(phantom, labels, rng)
            imaging.write_image(out_dir / rel, img)
            for region, m in masks.items():
                imaging.write_mask(mask_path(out_dir, rel, region), m)
            n = phantom.image_size
            sidecar = {
                "image": rel,
                "labels": labels,
                "provenance": "synthetic-phantom",
                "optic_disc": {"cx_px": phantom.disc_center[0] * (n - 1),
                               "cy_px": phantom.disc_center[1] * (n - 1),
                               "r_px": phantom.disc_radius * n},
                "macula": {"cx_px": phantom.macula_center[0] * (n - 1),
                           "cy_px": phantom.macula_center[1] * (n - 1),
                           "r_px": phantom.macula_radius * n},
                "fov_radius_px": phantom.fov_radius * n,
                "phantom": asdict(phantom),
            }
            with open(sidecar_path(out_dir, rel), "w") as fh:
                json.dump(sidecar, fh, indent=2, sort_keys=True)
            records.append(ImageRecord(rel, f"S{s:04d}", f"V{v}",
                                       labels["hba1c"], labels["kidney"], labels["multi"]))
    write_manifest(out_dir / "manifest.csv", records)
    return records
