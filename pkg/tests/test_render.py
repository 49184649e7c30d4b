from __future__ import annotations

import math

import numpy as np
import pytest

from volnav.camera import Viewpoint, quat_from_axis_angle, quat_multiply, to_camera_frame
from volnav.errors import ConfigurationError
from volnav.render import (
    Image,
    RenderSettings,
    bytes_to_image,
    image_to_bytes,
    load_png,
    render,
    render_png,
)
from volnav.volume import TransferFunction, Volume


def flat_tf(alpha: float, rgb=(1.0, 1.0, 1.0)) -> TransferFunction:
    return TransferFunction.from_points([(0.0, (*rgb, alpha)), (1.0, (*rgb, alpha))])


def ramp_tf(max_alpha: float = 0.8) -> TransferFunction:
    return TransferFunction.from_points([
        (0.0, (0, 0, 0, 0)),
        (0.4, (0.1, 0.2, 0.8, 0.3 * max_alpha)),
        (1.0, (1.0, 0.9, 0.6, max_alpha)),
    ])


def smooth_blob_volume(n=24, seed=4, bumps=3) -> Volume:
    """Asymmetric smooth field supported inside the inscribed sphere."""
    rng = np.random.default_rng(seed)
    coords = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    center = (n - 1) / 2.0
    field = np.zeros((n, n, n))
    for _ in range(bumps):
        pos = center + rng.uniform(-0.22 * n, 0.22 * n, size=3)
        sigma = rng.uniform(0.06 * n, 0.12 * n)
        d2 = np.sum((coords - pos) ** 2, axis=-1)
        field += rng.uniform(0.4, 1.0) * np.exp(-d2 / (2 * sigma**2))
    r2 = np.sum((coords - center) ** 2, axis=-1)
    field *= r2 <= (0.42 * n) ** 2
    field /= max(field.max(), 1e-9)
    return Volume((n, n, n), (1.0, 1.0, 1.0), field)


def overview_frame(vol, q=(1.0, 0, 0, 0), depth_factor=3.0, fov=math.radians(45)):
    vp = Viewpoint(tuple(np.asarray(q, float) / np.linalg.norm(q)),
                   depth=depth_factor * vol.bounding_radius)
    return to_camera_frame(vp, fov=fov, radius=vol.bounding_radius)


def test_transparent_tf_returns_background():
    vol = smooth_blob_volume(12)
    settings = RenderSettings(background=(0.1, 0.2, 0.3, 1.0))
    img = render(vol, flat_tf(0.0), overview_frame(vol), settings, (16, 16))
    assert np.allclose(img.pixels[..., :3], (0.1, 0.2, 0.3), atol=1e-12)
    assert np.allclose(img.pixels[..., 3], 1.0)


def test_opaque_volume_saturates_interior():
    n = 16
    vol = Volume((n, n, n), (1, 1, 1), np.full((n, n, n), 0.5))
    img = render(vol, flat_tf(0.9, rgb=(0.2, 0.6, 0.4)), overview_frame(vol),
                 RenderSettings(background=(0, 0, 0, 1)), (33, 33))
    center = img.pixels[16, 16]
    assert center[3] >= 0.98
    # compositing stops once accumulated alpha passes the termination
    # threshold, so the color is the tf color scaled by that alpha
    f = center[0] / 0.2
    assert 0.98 <= f <= 1.0 + 1e-9
    assert np.allclose(center[:3] / f, (0.2, 0.6, 0.4), atol=1e-9)


def test_impulse_volume_matches_pinhole_projection():
    n = 32
    rng = np.random.default_rng(8)
    for trial in range(5):
        vox = np.zeros((n, n, n))
        ijk = rng.integers(8, 24, size=3)
        vox[tuple(ijk)] = 1.0
        vol = Volume((n, n, n), (1, 1, 1), vox)
        q = rng.normal(size=4)
        frame = overview_frame(vol, q)
        width = height = 65
        impulse_tf = TransferFunction.from_points([
            (0.0, (1, 1, 1, 0.0)), (0.15, (1, 1, 1, 0.0)), (1.0, (1, 1, 1, 1.0)),
        ])
        img = render(vol, impulse_tf, frame,
                     RenderSettings(background=(0, 0, 0, 0)), (width, height))
        mask = img.pixels[..., 3] > 0.02
        assert mask.any(), f"impulse invisible on trial {trial}"
        ys, xs = np.nonzero(mask)
        got = np.array([xs.mean(), ys.mean()])

        # pinhole oracle: project the voxel center through the camera
        world = vol.world_min + (ijk + 0.5) * np.asarray(vol.spacing)
        cam = frame.basis @ (world - frame.eye_v)
        half_h = math.tan(frame.fov_y / 2)
        half_w = half_h * frame.aspect
        px = (cam[0] / cam[2] / half_w + 1.0) / 2.0 * width - 0.5
        py = (1.0 - cam[1] / cam[2] / half_h) / 2.0 * height - 0.5
        assert np.linalg.norm(got - (px, py)) <= 1.0


def test_single_ray_composite_matches_loop_oracle():
    vol = smooth_blob_volume(20, seed=9)
    tf = ramp_tf()
    frame = overview_frame(vol, (0.9, 0.1, -0.3, 0.2))
    step = 0.37
    settings = RenderSettings(step=step, background=(0.05, 0.1, 0.15, 1.0),
                              early_termination=1.0)
    img = render(vol, tf, frame, settings, (1, 1))

    # independent march: same midpoints, own trilinear + compositing loop
    half_h = math.tan(frame.fov_y / 2)
    d = np.asarray(frame.forward)  # center pixel ray (1x1 image)
    o = frame.eye_v
    lo, hi = vol.world_min, -vol.world_min
    with np.errstate(divide="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    t_start = max(np.minimum(t1, t2).max(), frame.near)
    t_end = min(np.maximum(t1, t2).min(), frame.far)

    def sample(p):
        u = np.clip((p - vol.world_min) / np.asarray(vol.spacing) - 0.5, 0, np.asarray(vol.dims) - 1)
        i0 = np.minimum(np.floor(u).astype(int), np.asarray(vol.dims) - 2)
        f = u - i0
        acc = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wgt = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                           * (f[2] if dz else 1 - f[2]))
                    acc += wgt * vol.voxels[i0[0] + dx, i0[1] + dy, i0[2] + dz]
        return acc

    color = np.zeros(3)
    alpha = 0.0
    alphas_seen = []
    s = 0
    while True:
        t = t_start + (s + 0.5) * step
        if t >= t_end:
            break
        rgba = tf.lookup(np.array([sample(o + t * d)]))[0]
        color += (1 - alpha) * rgba[3] * rgba[:3]
        alpha += (1 - alpha) * rgba[3]
        alphas_seen.append(alpha)
        s += 1
    assert all(b >= a - 1e-12 for a, b in zip(alphas_seen, alphas_seen[1:]))
    assert alphas_seen[-1] <= 1.0 + 1e-12
    color += (1 - alpha) * np.array([0.05, 0.1, 0.15])
    alpha += (1 - alpha) * 1.0
    assert np.allclose(img.pixels[0, 0, :3], color, atol=1e-9)
    assert np.allclose(img.pixels[0, 0, 3], alpha, atol=1e-9)


def test_alpha_bounds_random_renders():
    rng = np.random.default_rng(3)
    vol = smooth_blob_volume(16, seed=5)
    for _ in range(5):
        q = rng.normal(size=4)
        alpha_scale = float(rng.uniform(0.1, 1.0))
        img = render(vol, ramp_tf(alpha_scale), overview_frame(vol, q),
                     RenderSettings(background=(0, 0, 0, 0)), (24, 24))
        assert img.pixels[..., 3].min() >= 0.0
        assert img.pixels[..., 3].max() <= 1.0


def test_opacity_monotonicity():
    vol = smooth_blob_volume(16, seed=6)
    frame = overview_frame(vol)
    base_alpha = render(vol, ramp_tf(0.4), frame,
                        RenderSettings(background=(0, 0, 0, 0)), (24, 24)).pixels[..., 3]
    boosted = render(vol, ramp_tf(0.8), frame,
                     RenderSettings(background=(0, 0, 0, 0)), (24, 24)).pixels[..., 3]
    assert np.all(boosted >= base_alpha - 1e-12)


def test_rotation_consistency_with_volume_rotation_oracle():
    scipy_ndimage = pytest.importorskip("scipy.ndimage")
    vol = smooth_blob_volume(28, seed=11)
    tf = ramp_tf()
    q0 = np.asarray((0.8, 0.2, -0.5, 0.1)) / np.linalg.norm((0.8, 0.2, -0.5, 0.1))
    q = quat_from_axis_angle((0.3, 1.0, -0.2), 0.7)

    rotated_cam = quat_multiply(q, q0)
    rotated_cam /= np.linalg.norm(rotated_cam)
    img_cam = render(vol, tf, overview_frame(vol, rotated_cam),
                     RenderSettings(background=(0, 0, 0, 1)), (48, 48))

    # oracle: resample the voxels so features move by the inverse rotation
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    c = (np.asarray(vol.dims) - 1) / 2.0
    moved = scipy_ndimage.affine_transform(vol.voxels, rot, offset=c - rot @ c,
                                           order=1, mode="constant", cval=0.0)
    rot_vol = Volume(vol.dims, vol.spacing, np.clip(moved, 0, 1))
    img_vol = render(rot_vol, tf, overview_frame(vol, q0),
                     RenderSettings(background=(0, 0, 0, 1)), (48, 48))

    mae = float(np.mean(np.abs(img_cam.pixels - img_vol.pixels)))
    assert mae < 2e-2


def test_png_round_trip_and_determinism(tmp_path):
    vol = smooth_blob_volume(12, seed=7)
    frame = overview_frame(vol)
    settings = RenderSettings(background=(0.3, 0.1, 0.6, 1.0))
    p1 = render_png(vol, ramp_tf(), frame, settings, (20, 20), tmp_path / "a.png")
    p2 = render_png(vol, ramp_tf(), frame, settings, (20, 20), tmp_path / "b.png")
    assert p1.read_bytes() == p2.read_bytes()

    img = render(vol, ramp_tf(), frame, settings, (20, 20))
    again = bytes_to_image(image_to_bytes(img))
    assert np.max(np.abs(again.pixels - img.pixels)) <= 0.5 / 255 + 1e-12

    decoded = load_png(p1)
    assert decoded.width == 20 and decoded.height == 20


def test_background_only_png_uniform(tmp_path):
    vol = smooth_blob_volume(8)
    path = render_png(vol, flat_tf(0.0), overview_frame(vol),
                      RenderSettings(background=(0.5, 0.25, 0.75, 1.0)), (8, 8),
                      tmp_path / "bg.png")
    img = load_png(path)
    assert np.all(img.pixels.reshape(-1, 4) == img.pixels[0, 0])


def test_render_rejects_bad_settings():
    with pytest.raises(ConfigurationError):
        RenderSettings(step=-1.0)
    with pytest.raises(ConfigurationError):
        RenderSettings(early_termination=0.0)
    with pytest.raises(ConfigurationError):
        Image(2, 2, np.zeros((2, 2, 3)))


def test_rays_missing_volume_keep_background():
    vol = smooth_blob_volume(16, seed=12)
    # wide fov from afar: corner rays miss the volume box entirely
    frame = overview_frame(vol, depth_factor=3.9, fov=math.radians(70))
    img = render(vol, flat_tf(1.0), frame,
                 RenderSettings(background=(1.0, 0.0, 0.0, 1.0)), (31, 31))
    assert np.allclose(img.pixels[0, 0], (1.0, 0.0, 0.0, 1.0))
