"""Viewpoint parameterization, spherical sampling, projection, and visibility.

A viewpoint is a unit quaternion plus a depth. The quaternion rotates the
canonical camera basis right=(1,0,0), up=(0,1,0), forward=(0,0,1); the eye
sits at ``look_at - forward * depth``. With the identity quaternion the
camera therefore hangs at (0,0,-depth) looking down +z at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDirectionError, DegenerateOrientationError

DEFAULT_FOV = math.radians(45.0)
DEFAULT_ASPECT = 1.0
D_MIN_FACTOR = 1.2  # x bounding radius
D_MAX_FACTOR = 4.0
ACTION_QUAT_SCALE = 0.1  # quaternion increment per unit action component
ACTION_DEPTH_FACTOR = 0.2  # depth increment per unit action, x bounding radius

_CANON_RIGHT = np.array([1.0, 0.0, 0.0])
_CANON_UP = np.array([0.0, 1.0, 0.0])
_CANON_FORWARD = np.array([0.0, 0.0, 1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n < 1e-8:
        raise DegenerateOrientationError(f"quaternion norm {n:.3e} too small to normalize")
    return q / n

def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by unit quaternion q = (w, x, y, z)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv, w = q[1:], q[0]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)

def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])

def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])

def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def _quat_from_matrix(m: np.ndarray) -> np.ndarray:
    # Shepperd's method; m columns are the rotated canonical axes.
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:  # canonical sign, keeps sampling deterministic
        q = -q
    return q


def look_rotation(forward, up_hint=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Quaternion rotating the canonical basis so +z maps onto ``forward``.

    Roll is fixed by keeping camera-up as close to ``up_hint`` as possible;
    when forward is (anti)parallel to the hint, world +z breaks the tie.
    """
    f = np.asarray(forward, dtype=float)
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise DegenerateDirectionError("zero-length view direction")
    f = f / n
    hint = np.asarray(up_hint, dtype=float)
    r = np.cross(hint, f)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(np.array([0.0, 0.0, 1.0]), f)
    r = r / np.linalg.norm(r)
    u = np.cross(f, r)
    return _quat_from_matrix(np.column_stack([r, u, f]))


@dataclass(frozen=True)
class Viewpoint:
    """Unit-quaternion orientation plus depth along the back-projected axis."""

    orientation: tuple[float, float, float, float]  # (w, x, y, z)
    depth: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        if abs(float(np.linalg.norm(q)) - 1.0) > 1e-9:
            raise DegenerateOrientationError(
                f"viewpoint quaternion must be unit, norm={np.linalg.norm(q)}"
            )
        if self.depth <= 0.0:
            raise ConfigurationError(f"viewpoint depth must be positive, got {self.depth}")
        object.__setattr__(self, "orientation", tuple(float(c) for c in q))
        object.__setattr__(self, "look_at", tuple(float(c) for c in self.look_at))
        object.__setattr__(self, "depth", float(self.depth))

    @property
    def forward(self) -> np.ndarray:
        return quat_rotate(self.orientation, _CANON_FORWARD)

    @property
    def eye(self) -> np.ndarray:
        return np.asarray(self.look_at) - self.forward * self.depth


@dataclass(frozen=True)
class Provenance:
    kind: str  # "uniform" | "block"
    block_index: tuple[int, int, int] | None = None


@dataclass(frozen=True)
class ViewpointSet:
    viewpoints: tuple[Viewpoint, ...]
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        if len(self.viewpoints) != len(self.provenance):
            raise ConfigurationError("viewpoints and provenance lengths differ")

    def __len__(self) -> int:
        return len(self.viewpoints)

    def extend(self, other: "ViewpointSet") -> "ViewpointSet":
        return ViewpointSet(self.viewpoints + other.viewpoints,
                            self.provenance + other.provenance)


_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
    (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
    (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
], dtype=float)
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosphere_directions(k: int) -> np.ndarray:
    """Unit directions at the 20 * 4**k face centers of the subdivided icosahedron."""
    if k < 0:
        raise ConfigurationError(f"subdivision level must be >= 0, got {k}")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = [tuple(verts[i] for i in f) for f in _ICO_FACES]
    for _ in range(k):
        split = []
        for a, b, c in faces:
            # midpoints go back onto the unit sphere before face centers are taken
            ab = (a + b) / np.linalg.norm(a + b)
            bc = (b + c) / np.linalg.norm(b + c)
            ca = (c + a) / np.linalg.norm(c + a)
            split.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = split
    centers = np.array([(a + b + c) / 3.0 for a, b, c in faces])
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def icosphere_viewpoints(k: int, depth: float) -> ViewpointSet:
    """Uniform spherical sampling: all cameras look at the volume center."""
    if depth <= 0.0:
        raise ConfigurationError(f"depth must be positive, got {depth}")
    dirs = icosphere_directions(k)
    vps = []
    for d in dirs:
        eye = d * depth
        q = look_rotation(-d)  # forward from eye toward the origin
        vps.append(Viewpoint(tuple(q), depth))
    prov = tuple(Provenance("uniform") for _ in vps)
    return ViewpointSet(tuple(vps), prov)


def block_centered_viewpoints(base: ViewpointSet, blocks, dirs_per_block: int,
                              rng_seed: int) -> ViewpointSet:
    """Retarget sampled base eyes toward block centers.

    Eyes stay where the base sampling put them; only the orientation turns
    toward each chosen block. The result stores the block center as its
    look-at, so the serialized block index is enough to reconstruct the eye.
    """
    if len(base) == 0:
        raise ConfigurationError("base viewpoint set is empty")
    if dirs_per_block <= 0 or dirs_per_block > len(base):
        raise ConfigurationError(
            f"dirs-per-block {dirs_per_block} must be in 1..{len(base)} (sampling without replacement)"
        )
    rng = np.random.default_rng(rng_seed)
    vps, prov = [], []
    for b in blocks:
        center = np.asarray(b.center, dtype=float)
        picks = rng.choice(len(base), size=dirs_per_block, replace=False)
        for i in picks:
            src = base.viewpoints[int(i)]
            eye = src.eye
            delta = center - eye
            dist = float(np.linalg.norm(delta))
            if dist < 1e-12:
                raise DegenerateDirectionError(
                    f"viewpoint coincides with block center {b.index}"
                )
            direction = delta / dist
            q = look_rotation(direction)
            vps.append(Viewpoint(tuple(q), dist, tuple(center)))
            prov.append(Provenance("block", b.index))
    return ViewpointSet(tuple(vps), tuple(prov))


@dataclass(frozen=True)
class CameraFrame:
    eye: tuple[float, float, float]
    right: tuple[float, float, float]
    up: tuple[float, float, float]
    forward: tuple[float, float, float]
    fov_y: float
    aspect: float
    near: float
    far: float

    def __post_init__(self):
        basis = np.array([self.right, self.up, self.forward])
        if np.max(np.abs(basis @ basis.T - np.eye(3))) > 1e-6:
            raise ConfigurationError("camera basis is not orthonormal")
        if not (0.0 < self.near < self.far):
            raise ConfigurationError(f"invalid near/far: {self.near}, {self.far}")

    @property
    def eye_v(self) -> np.ndarray:
        return np.asarray(self.eye)

    @property
    def basis(self) -> np.ndarray:
        """Rows: right, up, forward."""
        return np.array([self.right, self.up, self.forward])


def to_camera_frame(v: Viewpoint, fov: float = DEFAULT_FOV, aspect: float = DEFAULT_ASPECT,
                    radius: float = 1.0) -> CameraFrame:
    """Realize a viewpoint as an explicit frame around a bounding sphere of ``radius``."""
    r = quat_rotate(v.orientation, _CANON_RIGHT)
    u = quat_rotate(v.orientation, _CANON_UP)
    f = quat_rotate(v.orientation, _CANON_FORWARD)
    eye = np.asarray(v.look_at) - f * v.depth
    near = max(v.depth - 2.0 * radius, 0.01 * radius)
    far = v.depth + 2.0 * radius
    return CameraFrame(tuple(eye), tuple(r), tuple(u), tuple(f), fov, aspect, near, far)


def project_block(b, frame: CameraFrame) -> np.ndarray:
    """Block center in camera coordinates (right, up, forward)."""
    delta = np.asarray(b.center) - frame.eye_v
    return frame.basis @ delta


def _frustum_planes(frame: CameraFrame) -> list[tuple[np.ndarray, float]]:
    """Inward-facing planes (n, d): a point p is inside when n.p + d >= 0."""
    r, u, f = (np.asarray(frame.right), np.asarray(frame.up), np.asarray(frame.forward))
    eye = frame.eye_v
    h = math.tan(frame.fov_y / 2.0)
    w = h * frame.aspect
    planes = []
    planes.append((f, -float(f @ eye) - frame.near))          # near
    planes.append((-f, float(f @ eye) + frame.far))           # far
    for n_cam in ((1.0, 0.0, w), (-1.0, 0.0, w), (0.0, 1.0, h), (0.0, -1.0, h)):
        n = n_cam[0] * r + n_cam[1] * u + n_cam[2] * f
        planes.append((n, -float(n @ eye)))
    return planes


def visible_blocks(grid, frame: CameraFrame) -> list[int]:
    """Indices (into ``grid.blocks``) whose world AABB may intersect the frustum.

    Conservative: a block is dropped only when it is entirely outside one
    frustum plane, so false positives are possible but false negatives are not.
    """
    planes = _frustum_planes(frame)
    lo = np.array([b.world_lo for b in grid.blocks])
    hi = np.array([b.world_hi for b in grid.blocks])
    keep = np.ones(len(grid.blocks), dtype=bool)
    for n, d in planes:
        pvert = np.where(n > 0.0, hi, lo)  # most-inside corner for this plane
        keep &= (pvert @ n + d) >= 0.0
    return [int(i) for i in np.nonzero(keep)[0]]


def apply_action(v: Viewpoint, a, *, d_min: float, d_max: float,
                 quat_scale: float = ACTION_QUAT_SCALE) -> Viewpoint:
    """Incremental viewpoint update: additive quaternion nudge plus depth delta.

    ``a`` has five components: the first four are in [-1, 1] and are scaled
    by ``quat_scale`` before being added to the quaternion (which is then
    renormalized); the fifth is a depth delta in world units, clamped so the
    result stays inside [d_min, d_max].
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (5,):
        raise ValueError(f"action must have 5 components, got shape {a.shape}")
    q = np.asarray(v.orientation) + quat_scale * a[:4]
    q = quat_normalize(q)  # raises DegenerateOrientationError when the sum collapses
    depth = float(np.clip(v.depth + a[4], d_min, d_max))
    return Viewpoint(tuple(q), depth, v.look_at)


def serialize_viewpoints(vs: ViewpointSet) -> str:
    """One line per entry: ``tag qw qx qy qz depth [i,j,k]``."""
    lines = []
    for vp, pv in zip(vs.viewpoints, vs.provenance):
        qs = " ".join(repr(c) for c in vp.orientation)
        line = f"{pv.kind} {qs} {vp.depth!r}"
        if pv.kind == "block":
            line += " " + ",".join(str(i) for i in pv.block_index)
        lines.append(line)
    return "\n".join(lines) + "\n"


def deserialize_viewpoints(text: str, grid=None) -> ViewpointSet:
    """Inverse of :func:`serialize_viewpoints`.

    Uniform entries look at the origin. Block entries look at the center of
    their tagged block, so ``grid`` (the partition the tags refer to) is
    required whenever block lines are present.
    """
    vps, prov = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "uniform" and len(parts) == 6:
            q = tuple(float(x) for x in parts[1:5])
            vps.append(Viewpoint(q, float(parts[5])))
            prov.append(Provenance("uniform"))
        elif parts[0] == "block" and len(parts) == 7:
            if grid is None:
                raise ValueError(f"line {lineno}: block entry needs the block grid to resolve its look-at")
            q = tuple(float(x) for x in parts[1:5])
            block_index = tuple(int(x) for x in parts[6].split(","))
            center = grid.block_at(block_index).center
            vps.append(Viewpoint(q, float(parts[5]), center))
            prov.append(Provenance("block", block_index))
        else:
            raise ValueError(f"line {lineno}: expected 'tag qw qx qy qz depth [i,j,k]'")
    return ViewpointSet(tuple(vps), tuple(prov))
