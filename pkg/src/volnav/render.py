"""Software direct-volume-rendering raycaster.

Emission-absorption only, front-to-back compositing with early ray
termination. All rays march in lockstep over numpy arrays, so evaluation
order cannot affect the result.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .camera import CameraFrame
from .errors import ConfigurationError
from .volume import TransferFunction, Volume

DEFAULT_EARLY_TERMINATION = 0.98


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 4) floats in [0, 1], row 0 at the top

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 4):
            raise ConfigurationError(
                f"pixel array {self.pixels.shape} != (h={self.height}, w={self.width}, 4)"
            )
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ConfigurationError("pixel channels must lie in [0, 1]")
        self.pixels.setflags(write=False)


@dataclass(frozen=True)
class RenderSettings:
    step: float | None = None  # world units; None picks half the min voxel spacing
    background: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)
    early_termination: float = DEFAULT_EARLY_TERMINATION

    def __post_init__(self):
        if self.step is not None and self.step <= 0.0:
            raise ConfigurationError(f"step must be positive, got {self.step}")
        if not (0.0 < self.early_termination <= 1.0):
            raise ConfigurationError("early-termination threshold must lie in (0, 1]")


def _ray_grid(frame: CameraFrame, width: int, height: int):
    """World-space unit directions for every pixel center, row-major."""
    half_h = np.tan(frame.fov_y / 2.0)
    half_w = half_h * frame.aspect
    xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * half_w
    ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * half_h
    cx, cy = np.meshgrid(xs, ys)  # (h, w)
    r, u, f = frame.basis
    dirs = cx[..., None] * r + cy[..., None] * u + f
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs.reshape(-1, 3)


def _slab_intersect(origin, dirs, lo, hi):
    """Entry/exit distances of rays against an axis-aligned box (slab method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # rays parallel to a slab: inside iff origin between the planes
    parallel = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    return t_near, t_far


def _trilinear(vol: Volume, points: np.ndarray) -> np.ndarray:
    """Sample world-space points with trilinear interpolation, edge clamped."""
    dims = np.asarray(vol.dims)
    u = (points - vol.world_min) / np.asarray(vol.spacing) - 0.5
    u = np.clip(u, 0.0, dims - 1.0)
    i0 = np.floor(u).astype(np.intp)
    i0 = np.minimum(i0, np.maximum(dims - 2, 0))
    frac = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    v = vol.voxels
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    c00 = v[x0, y0, z0] * (1 - fx) + v[x1, y0, z0] * fx
    c10 = v[x0, y1, z0] * (1 - fx) + v[x1, y1, z0] * fx
    c01 = v[x0, y0, z1] * (1 - fx) + v[x1, y0, z1] * fx
    c11 = v[x0, y1, z1] * (1 - fx) + v[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def render(vol: Volume, tf: TransferFunction, frame: CameraFrame,
           settings: RenderSettings = RenderSettings(),
           size: tuple[int, int] = (256, 256)) -> Image:
    width, height = size
    if width <= 0 or height <= 0:
        raise ConfigurationError(f"image size must be positive, got {size}")
    step = settings.step if settings.step is not None else 0.5 * min(vol.spacing)
    dirs = _ray_grid(frame, width, height)
    n_rays = dirs.shape[0]
    origin = frame.eye_v[None, :]

    t_near, t_far = _slab_intersect(origin, dirs, vol.world_min, -vol.world_min)
    t_start = np.maximum(t_near, frame.near)
    t_end = np.minimum(t_far, frame.far)
    hit = t_end > t_start

    color = np.zeros((n_rays, 3))
    alpha = np.zeros(n_rays)
    max_steps = 0
    if np.any(hit):
        max_steps = int(np.ceil((t_end[hit] - t_start[hit]).max() / step))
    for s in range(max_steps):
        t = t_start + (s + 0.5) * step
        active = hit & (t < t_end) & (alpha < settings.early_termination)
        if not np.any(active):
            break
        pts = origin + dirs[active] * t[active, None]
        rgba = tf.lookup(_trilinear(vol, pts))
        a = rgba[:, 3]
        weight = (1.0 - alpha[active]) * a
        color[active] += weight[:, None] * rgba[:, :3]
        alpha[active] += weight

    bg = np.asarray(settings.background, dtype=float)
    color += (1.0 - alpha)[:, None] * (bg[3] * bg[:3])
    alpha += (1.0 - alpha) * bg[3]
    pixels = np.concatenate([color, alpha[:, None]], axis=1).reshape(height, width, 4)
    return Image(width, height, np.clip(pixels, 0.0, 1.0))


def image_to_bytes(img: Image) -> bytes:
    """Deterministic 8-bit RGBA PNG encoding."""
    quant = np.round(img.pixels * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(quant, mode="RGBA")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def bytes_to_image(data: bytes) -> Image:
    pil = PILImage.open(io.BytesIO(data)).convert("RGBA")
    pixels = np.asarray(pil, dtype=np.float64) / 255.0
    return Image(pil.width, pil.height, pixels)


def render_png(vol: Volume, tf: TransferFunction, frame: CameraFrame,
               settings: RenderSettings, size: tuple[int, int],
               path: str | Path) -> Path:
    img = render(vol, tf, frame, settings, size)
    path = Path(path)
    try:
        path.write_bytes(image_to_bytes(img))
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc
    return path


def load_png(path: str | Path) -> Image:
    return bytes_to_image(Path(path).read_bytes())
