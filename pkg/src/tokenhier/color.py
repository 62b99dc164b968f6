"""Color-space conversions and channel-statistic stain jitter.

A raster is a ``(H, W, 3)`` uint8 ndarray, row-major RGB.  Conversions
produce float64 channel images: LAB with L in [0,100], HSV with H in
[0,360) and S,V in [0,1].  Round trips are exact to well under one 8-bit
step, so augmenting with all sigmas at zero reproduces the input after
the conversion round trip.

The augmentation perturbs per-patch channel statistics: for each channel
draw a mean offset and a spread ratio from Gaussians, then remap
``x -> (x - mu) * rho + mu + dmu``.  Hue is circular, so it only gets
the additive offset (mod 360) and is never spread-scaled.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParameterError, ShapeError
from .numkernel import RngStream

Raster = np.ndarray

# sRGB (D65) to XYZ. White is anchored to the matrix row sums so that
# (255,255,255) lands on L=100, a=b=0 exactly.
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = _RGB2XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def as_raster(a, name: str = "raster") -> Raster:
    r = np.asarray(a)
    if r.ndim != 3 or r.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {r.shape}")
    if r.shape[0] == 0 or r.shape[1] == 0:
        raise ParameterError(f"{name} has no pixels")
    if r.dtype != np.uint8:
        if not np.issubdtype(r.dtype, np.integer):
            raise ParameterError(f"{name} must be 8-bit integer, got {r.dtype}")
        if r.min() < 0 or r.max() > 255:
            raise ParameterError(f"{name} values outside [0, 255]")
        r = r.astype(np.uint8)
    return r


def _srgb_to_linear(c):
    # c in [0,1]
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t):
    t = np.maximum(t, 0.0)
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_finv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(r: Raster) -> np.ndarray:
    """CIELAB (D65) as float64, channels (L, a, b)."""
    rgb = as_raster(r).astype(np.float64) / 255.0
    lin = _srgb_to_linear(rgb)
    xyz = lin @ _RGB2XYZ.T
    f = _lab_f(xyz / _WHITE)
    out = np.empty_like(f)
    out[..., 0] = 116.0 * f[..., 1] - 16.0
    out[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    out[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return out


def lab_to_rgb(img) -> Raster:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut values clamp to [0,255]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"lab image must have shape (H, W, 3), got {img.shape}")
    fy = (img[..., 0] + 16.0) / 116.0
    fx = fy + img[..., 1] / 500.0
    fz = fy - img[..., 2] / 200.0
    xyz = np.stack([_lab_finv(fx), _lab_finv(fy), _lab_finv(fz)], axis=-1) * _WHITE
    lin = xyz @ _XYZ2RGB.T
    srgb = _linear_to_srgb(lin)
    return np.clip(np.rint(srgb * 255.0), 0, 255).astype(np.uint8)


def rgb_to_hsv(r: Raster) -> np.ndarray:
    """Hexcone HSV as float64; H in [0,360), S,V in [0,1], gray pins H=0."""
    rgb = as_raster(r).astype(np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    d = mx - mn
    rc, gc, bc = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(d == 0, 1.0, d)
    h = np.where(
        mx == rc, (gc - bc) / safe,
        np.where(mx == gc, (bc - rc) / safe + 2.0, (rc - gc) / safe + 4.0),
    )
    h = np.mod(60.0 * h, 360.0)
    h = np.where(d == 0, 0.0, h)
    s = np.where(mx == 0, 0.0, d / np.where(mx == 0, 1.0, mx))
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(img) -> Raster:
    """Inverse hexcone transform; S,V clamp to [0,1], H wraps mod 360."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"hsv image must have shape (H, W, 3), got {img.shape}")
    h = np.mod(img[..., 0], 360.0) / 60.0
    s = np.clip(img[..., 1], 0.0, 1.0)
    v = np.clip(img[..., 2], 0.0, 1.0)
    c = v * s
    x = c * (1.0 - np.abs(np.mod(h, 2.0) - 1.0))
    m = v - c
    sector = np.floor(h).astype(np.int64) % 6
    z = np.zeros_like(c)
    # rgb_by_sector[k] picks the (r,g,b) pattern for sector k
    patterns = [(c, x, z), (x, c, z), (z, c, x), (z, x, c), (x, z, c), (c, z, x)]
    rgb = np.zeros(img.shape, dtype=np.float64)
    for k, (pr, pg, pb) in enumerate(patterns):
        mask = sector == k
        rgb[..., 0] = np.where(mask, pr, rgb[..., 0])
        rgb[..., 1] = np.where(mask, pg, rgb[..., 1])
        rgb[..., 2] = np.where(mask, pb, rgb[..., 2])
    rgb += m[..., None]
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


_SPACES = ("lab", "hsv", "both")


@dataclass(frozen=True)
class StainAugConfig:
    """Jitter magnitudes per color space.

    space: "lab", "hsv", or "both" ("both" runs LAB first, then HSV,
    with independent draws).  Sigmas are per-channel triples in the
    target space's units; hue's spread sigma is drawn but unused.
    """

    space: str = "both"
    lab_mean_sigma: tuple = (2.0, 1.5, 1.5)
    lab_std_sigma: tuple = (0.08, 0.08, 0.08)
    hsv_mean_sigma: tuple = (4.0, 0.03, 0.03)
    hsv_std_sigma: tuple = (0.05, 0.05, 0.05)
    enabled: bool = True

    def __post_init__(self):
        if self.space not in _SPACES:
            raise ConfigError(f"space must be one of {_SPACES}, got {self.space!r}")
        for name in ("lab_mean_sigma", "lab_std_sigma",
                     "hsv_mean_sigma", "hsv_std_sigma"):
            trip = getattr(self, name)
            if len(trip) != 3:
                raise ConfigError(f"{name} must have 3 entries, got {len(trip)}")
            for v in trip:
                if not np.isfinite(v) or v < 0:
                    raise ConfigError(f"{name} entries must be finite and >= 0")


_RHO_FLOOR = 0.05


def draw_stain_jitter(rng: RngStream, mean_sigma, std_sigma):
    """Draw (dmu, rho) triples in the documented order.

    Order is fixed: mean offsets for channels 0..2, then spread ratios
    for channels 0..2, one Gaussian draw each.  rho clamps to >= 0.05 so
    a channel can shrink but never flip or collapse.
    """
    dmu = np.array([rng.gaussian(1, 0.0, float(mean_sigma[c]))[0] for c in range(3)])
    rho = np.array([rng.gaussian(1, 1.0, float(std_sigma[c]))[0] for c in range(3)])
    return dmu, np.maximum(rho, _RHO_FLOOR)


def _jitter(img, mean_sigma, std_sigma, rng, hue_channel=None):
    dmu, rho = draw_stain_jitter(rng, mean_sigma, std_sigma)
    out = np.empty_like(img)
    for c in range(3):
        ch = img[..., c]
        if c == hue_channel:
            out[..., c] = np.mod(ch + dmu[c], 360.0)
        else:
            mu = ch.mean()
            out[..., c] = (ch - mu) * rho[c] + mu + dmu[c]
    return out


def stain_augment(r: Raster, cfg: StainAugConfig, rng: RngStream) -> Raster:
    """Perturb per-patch channel statistics in the configured space(s).

    Disabled configs return an untouched copy (no conversion round
    trip).  The same (raster, cfg, stream) triple always produces
    bit-identical output.
    """
    raster = as_raster(r)
    if not cfg.enabled:
        return raster.copy()
    out = raster
    if cfg.space in ("lab", "both"):
        lab = _jitter(rgb_to_lab(out), cfg.lab_mean_sigma, cfg.lab_std_sigma, rng)
        out = lab_to_rgb(lab)
    if cfg.space in ("hsv", "both"):
        hsv = _jitter(rgb_to_hsv(out), cfg.hsv_mean_sigma, cfg.hsv_std_sigma,
                      rng, hue_channel=0)
        out = hsv_to_rgb(hsv)
    return out


_WS = re.compile(rb"\s")


def write_ppm(path, raster: Raster) -> None:
    """Binary PPM (P6, maxval 255); byte-exact round trip with read_ppm."""
    r = as_raster(raster)
    h, w = r.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(r.tobytes())


def _ppm_token(buf: bytes, pos: int):
    # skip whitespace and '#' comment lines
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif _WS.match(ch):
            pos += 1
        else:
            break
    start = pos
    while pos < n and not _WS.match(buf[pos:pos + 1]):
        pos += 1
    if start == pos:
        raise DataError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> Raster:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _ppm_token(buf, 0)
    if magic != b"P6":
        raise DataError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _ppm_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DataError(f"bad PPM header token {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval}")
    if w <= 0 or h <= 0:
        raise DataError(f"bad PPM dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    data = buf[pos:pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise DataError("PPM pixel payload truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
