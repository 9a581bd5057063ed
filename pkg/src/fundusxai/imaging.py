"""Image decoding/encoding, bilinear resampling, normalization and augmentation.

Images travel through the pipeline as numpy arrays:

- raster image: uint8 array of shape (H, W, 3), RGB
- gray image / mask: 2-D array (uint8 for masks, values {0, 1})
- network tensor: float64 array of shape (3, H, W), channel-major

All stochastic behaviour is driven by an explicit ``numpy.random.Generator``
so every operation is a pure function of its inputs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_MIN_FILE_BYTES = 1024


class SuspiciousFile(ValueError):
    """File failed quality control before decoding (byte size below minimum)."""


class UndecodableImage(ValueError):
    """Byte stream could not be decoded into an RGB image."""


@dataclass(frozen=True)
class NormStats:
    """Per-channel normalization constants applied after the 1/255 scaling."""

    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean/std must have 3 components")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be positive")


def _check_raster(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 (H, W, 3) raster image, got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image dimensions must be >= 1")
    return img


# ---------------------------------------------------------------------------
# decoding / encoding


def _parse_ppm(data: bytes) -> np.ndarray:
    # P3 (ascii) and P6 (binary) with maxval 255 only
    try:
        magic = data[:2].decode("ascii")
    except UnicodeDecodeError:
        raise UndecodableImage("bad PPM magic")

    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UndecodableImage("truncated PPM header")
        fields.append(data[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise UndecodableImage("non-numeric PPM header field")
    if width < 1 or height < 1:
        raise UndecodableImage("non-positive PPM dimensions")
    if maxval != 255:
        raise UndecodableImage(f"unsupported PPM maxval {maxval}")

    n = width * height * 3
    if magic == "P6":
        pos += 1  # single whitespace byte after maxval
        payload = data[pos : pos + n]
        if len(payload) < n:
            raise UndecodableImage("truncated PPM pixel payload")
        flat = np.frombuffer(payload, dtype=np.uint8, count=n)
    elif magic == "P3":
        tokens = data[pos:].split()
        if len(tokens) < n:
            raise UndecodableImage("truncated PPM pixel payload")
        try:
            flat = np.array([int(t) for t in tokens[:n]], dtype=np.int64)
        except ValueError:
            raise UndecodableImage("non-numeric PPM sample")
        if flat.min() < 0 or flat.max() > 255:
            raise UndecodableImage("PPM sample out of range")
        flat = flat.astype(np.uint8)
    else:
        raise UndecodableImage(f"unknown PPM magic {magic!r}")
    return flat.reshape(height, width, 3)


def decode_image(data: bytes, min_bytes: int = DEFAULT_MIN_FILE_BYTES) -> np.ndarray:
    """Decode PNG or PPM bytes into a uint8 (H, W, 3) RGB array.

    Streams shorter than ``min_bytes`` are rejected as suspicious before any
    decode attempt; corrupt streams raise :class:`UndecodableImage`.
    """
    if len(data) < min_bytes:
        raise SuspiciousFile(f"byte length {len(data)} below minimum {min_bytes}")
    if data[:2] in (b"P3", b"P6"):
        return _parse_ppm(data)
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except Exception as exc:
        raise UndecodableImage(str(exc)) from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise UndecodableImage(f"decoded to unexpected shape {arr.shape}")
    return arr


def encode_png(img: np.ndarray) -> bytes:
    """Encode an RGB raster as non-interlaced 8-bit PNG bytes."""
    img = _check_raster(img)
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, "PNG")
    return buf.getvalue()


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode an RGB raster as binary (P6) PPM bytes."""
    img = _check_raster(img)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + img.tobytes()


def read_image(path, min_bytes: int = DEFAULT_MIN_FILE_BYTES) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read(), min_bytes=min_bytes)


def write_image(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(img))


def encode_mask_png(mask: np.ndarray) -> bytes:
    """Encode a {0, 1} mask as a single-channel PNG with values {0, 255}."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    arr = (mask.astype(np.uint8) > 0).astype(np.uint8) * 255
    buf = io.BytesIO()
    Image.fromarray(arr, "L").save(buf, "PNG")
    return buf.getvalue()


def read_mask(path) -> np.ndarray:
    """Read a single-channel mask PNG back to a {0, 1} uint8 array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr > 127).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_mask_png(mask))


# ---------------------------------------------------------------------------
# resampling


def _bilinear_grid(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center mapping (align_corners=False), sample coords clamped to the frame
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, in_size - 2) if in_size > 1 else np.zeros_like(lo)
    frac = src - lo
    return lo, lo + (1 if in_size > 1 else 0), frac


def resample_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a float (H, W) or (H, W, C) array."""
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return values.copy()
    y0, y1, fy = _bilinear_grid(in_h, out_h)
    x0, x1, fx = _bilinear_grid(in_w, out_w)
    fy = fy[:, None] if values.ndim == 2 else fy[:, None, None]
    fx = fx[None, :] if values.ndim == 2 else fx[None, :, None]
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bot = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize an RGB raster with half-pixel-center bilinear interpolation.

    Identical target dimensions return an exact copy; otherwise values are
    interpolated in float, clamped to [0, 255] and rounded to uint8.
    """
    img = _check_raster(img)
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    if (img.shape[0], img.shape[1]) == (out_h, out_w):
        return img.copy()
    out = resample_bilinear(img.astype(np.float64), out_h, out_w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# normalization


def to_tensor_normalized(img: np.ndarray, stats: NormStats = NormStats()) -> np.ndarray:
    """Convert a raster to a channel-major float64 tensor: (x/255 - mean) / std."""
    img = _check_raster(img)
    t = img.astype(np.float64) / 255.0
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    t = (t - mean) / std
    return np.ascontiguousarray(t.transpose(2, 0, 1))


def from_tensor(tensor: np.ndarray, stats: NormStats = NormStats()) -> np.ndarray:
    """Invert :func:`to_tensor_normalized` back to a uint8 raster."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) tensor, got {t.shape}")
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    img = (t.transpose(1, 2, 0) * std + mean) * 255.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    """Stochastic training-time augmentation parameters.

    Ranges are inclusive (low, high) pairs; collapsing a range to a single
    value pins the drawn factor, which the identity/involution tests rely on.
    Photometric factors are multiplicative except hue, which is an additive
    rotation of the HSV hue channel (fraction of a full turn).
    """

    crop_scale: tuple[float, float] = (0.80, 1.00)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.2
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    brightness: tuple[float, float] = (0.70, 1.30)
    contrast: tuple[float, float] = (0.70, 1.30)
    saturation: tuple[float, float] = (0.80, 1.20)
    hue: tuple[float, float] = (-0.05, 0.05)
    shear_deg: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        for name in ("crop_scale", "rotation_deg", "brightness", "contrast",
                     "saturation", "hue", "shear_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range must be ordered, got ({lo}, {hi})")
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        lo, hi = self.crop_scale
        if lo <= 0 or hi > 1.0:
            raise ValueError("crop_scale must lie in (0, 1]")


IDENTITY_AUGMENT = AugmentParams(
    crop_scale=(1.0, 1.0), hflip_prob=0.0, vflip_prob=0.0, rotation_deg=(0.0, 0.0),
    brightness=(1.0, 1.0), contrast=(1.0, 1.0), saturation=(1.0, 1.0),
    hue=(0.0, 0.0), shear_deg=(0.0, 0.0),
)


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def _affine_sample(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Sample an RGB float image through an inverse affine map about the center.

    ``inv`` maps output pixel coordinates (x, y, 1) to source coordinates;
    out-of-frame samples read as 0 (bilinear with constant padding).
    """
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    sx = inv[0, 0] * (xs - cx) + inv[0, 1] * (ys - cy) + cx + inv[0, 2]
    sy = inv[1, 0] * (xs - cx) + inv[1, 1] * (ys - cy) + cy + inv[1, 2]

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    out = np.zeros_like(img, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            vals = np.zeros_like(out)
            vals[valid] = img[yi[valid], xi[valid]]
            out += wgt * vals * valid[..., None]
    return out


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        safe = np.where(delta > 0, delta, 1.0)
        rc = (maxc - r) / safe
        gc = (maxc - g) / safe
        bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.select([i == k for k in range(6)], choices_r)
    g = np.select([i == k for k in range(6)], choices_g)
    b = np.select([i == k for k in range(6)], choices_b)
    return np.stack([r, g, b], axis=-1)


def augment(img: np.ndarray, params: AugmentParams, rng: np.random.Generator,
            out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Apply the stochastic training augmentation chain to a raster image.

    Fixed order: random resized crop, horizontal flip, vertical flip,
    rotation, color jitter (brightness, contrast, saturation, hue), shear.
    All draws are consumed in a fixed sequence regardless of whether the
    corresponding step fires, so a given (params, rng state) pair always
    yields the same output. Output dimensions equal ``out_size`` (defaults
    to the input dimensions).
    """
    img = _check_raster(img)
    h, w = img.shape[:2]
    out_h, out_w = out_size if out_size is not None else (h, w)

    scale = _uniform(rng, *params.crop_scale)
    u_top = float(rng.random())
    u_left = float(rng.random())
    u_hflip = float(rng.random())
    u_vflip = float(rng.random())
    angle = _uniform(rng, *params.rotation_deg)
    f_bri = _uniform(rng, *params.brightness)
    f_con = _uniform(rng, *params.contrast)
    f_sat = _uniform(rng, *params.saturation)
    d_hue = _uniform(rng, *params.hue)
    shear = _uniform(rng, *params.shear_deg)

    # random resized crop: area fraction `scale`, aspect ratio preserved
    crop_h = max(1, int(round(np.sqrt(scale) * h)))
    crop_w = max(1, int(round(np.sqrt(scale) * w)))
    top = int(round(u_top * (h - crop_h)))
    left = int(round(u_left * (w - crop_w)))
    out = img[top : top + crop_h, left : left + crop_w]
    out = resize_bilinear(out, out_w, out_h)

    if params.hflip_prob > 0 and u_hflip < params.hflip_prob:
        out = out[:, ::-1].copy()
    if params.vflip_prob > 0 and u_vflip < params.vflip_prob:
        out = out[::-1].copy()

    outf = out.astype(np.float64)
    if angle != 0.0:
        a = np.deg2rad(angle)
        inv = np.array([[np.cos(a), np.sin(a), 0.0], [-np.sin(a), np.cos(a), 0.0]])
        outf = _affine_sample(outf, inv)

    if f_bri != 1.0:
        outf = outf * f_bri
    if f_con != 1.0:
        gray_mean = (0.299 * outf[..., 0] + 0.587 * outf[..., 1] + 0.114 * outf[..., 2]).mean()
        outf = gray_mean + f_con * (outf - gray_mean)
    if f_sat != 1.0:
        gray = (0.299 * outf[..., 0] + 0.587 * outf[..., 1] + 0.114 * outf[..., 2])[..., None]
        outf = gray + f_sat * (outf - gray)
    if d_hue != 0.0:
        hsv = _rgb_to_hsv(np.clip(outf, 0, 255) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + d_hue) % 1.0
        outf = _hsv_to_rgb(hsv) * 255.0

    if shear != 0.0:
        inv = np.array([[1.0, np.tan(np.deg2rad(shear)), 0.0], [0.0, 1.0, 0.0]])
        outf = _affine_sample(np.clip(outf, 0, 255), inv)

    return np.clip(np.rint(outf), 0, 255).astype(np.uint8)
