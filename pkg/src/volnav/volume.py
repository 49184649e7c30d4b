"""Scalar volumes, transfer functions, and the regular block partition.

World frame convention (shared by every module): the volume is centered at
the origin, its world extent is ``dims * spacing``, and the bounding-sphere
radius ``R`` is half the box diagonal. Voxel ``(i, j, k)`` occupies the world
cube ``world_min + [i, i+1) * spacing`` per axis.

On disk a volume is a raw little-endian file (x fastest, then y, then z)
plus a sidecar ``<stem>.meta`` of UTF-8 ``key=value`` lines with keys
``name``, ``dims=X,Y,Z``, ``dtype`` (u8 or u16le), ``spacing=sx,sy,sz``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MalformedInputError

DTYPE_INFO = {
    "u8": (np.uint8, 255.0),
    "u16le": (np.dtype("<u2"), 65535.0),
}


@dataclass(frozen=True)
class Volume:
    """Dense scalar field with values normalized to [0, 1]."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxels: np.ndarray  # shape dims, float, read-only
    name: str = "volume"

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ConfigurationError(f"volume dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"voxel spacing must be positive, got {self.spacing}")
        if self.voxels.shape != self.dims:
            raise ConfigurationError(
                f"voxel array shape {self.voxels.shape} does not match dims {self.dims}"
            )
        vmin, vmax = float(self.voxels.min()), float(self.voxels.max())
        if vmin < 0.0 or vmax > 1.0:
            raise MalformedInputError(f"voxel values outside [0,1]: min={vmin}, max={vmax}")
        self.voxels.setflags(write=False)

    @property
    def world_size(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing, dtype=float)

    @property
    def world_min(self) -> np.ndarray:
        return -0.5 * self.world_size

    @property
    def bounding_radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.world_size))


@dataclass(frozen=True)
class Block:
    """One cell of the regular partition, with voxel extent and world box."""

    index: tuple[int, int, int]
    lo: tuple[int, int, int]  # inclusive voxel corner
    hi: tuple[int, int, int]  # exclusive voxel corner
    world_lo: tuple[float, float, float]
    world_hi: tuple[float, float, float]
    center: tuple[float, float, float]  # world midpoint of the extent
    mean_density: float
    max_density: float

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class BlockGrid:
    grid_dims: tuple[int, int, int]
    blocks: tuple[Block, ...]  # row-major over grid_dims
    volume_name: str = "volume"

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def block_at(self, index: tuple[int, int, int]) -> Block:
        gx, gy, gz = self.grid_dims
        i, j, k = index
        if not (0 <= i < gx and 0 <= j < gy and 0 <= k < gz):
            raise IndexError(f"block index {index} outside grid {self.grid_dims}")
        return self.blocks[(i * gy + j) * gz + k]


def load_volume(
    path: str | Path,
    dims: tuple[int, int, int],
    dtype: str,
    spacing: tuple[float, float, float],
    name: str | None = None,
) -> Volume:
    """Read a raw little-endian scalar file and normalize by the dtype range."""
    path = Path(path)
    if dtype not in DTYPE_INFO:
        raise ConfigurationError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPE_INFO)}")
    np_dtype, scale = DTYPE_INFO[dtype]
    np_dtype = np.dtype(np_dtype)
    expected = int(np.prod(dims)) * np_dtype.itemsize
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read volume file {path}: {exc}") from exc
    if len(raw) != expected:
        raise MalformedInputError(
            f"{path}: expected {expected} bytes for dims {tuple(dims)} {dtype}, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=np_dtype)
    # File order is x fastest: C-order (z, y, x); transpose into [x, y, z] indexing.
    vox = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    vox = np.ascontiguousarray(vox, dtype=np.float64) / scale
    return Volume(tuple(int(d) for d in dims), tuple(float(s) for s in spacing), vox,
                  name=name or path.stem)


def save_volume(vol: Volume, raw_path: str | Path, dtype: str = "u8") -> Path:
    """Quantize to the given dtype, write the raw file and its sidecar."""
    raw_path = Path(raw_path)
    if dtype not in DTYPE_INFO:
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    np_dtype, scale = DTYPE_INFO[dtype]
    quant = np.round(vol.voxels * scale).astype(np_dtype)
    raw_path.write_bytes(quant.transpose(2, 1, 0).tobytes())
    meta = raw_path.with_suffix(".meta")
    dims = ",".join(str(d) for d in vol.dims)
    spacing = ",".join(repr(float(s)) for s in vol.spacing)
    meta.write_text(
        f"name={vol.name}\ndims={dims}\ndtype={dtype}\nspacing={spacing}\n", encoding="utf-8"
    )
    return meta


def load_dataset(path: str | Path) -> Volume:
    """Load a volume given either its raw file or its ``.meta`` sidecar."""
    path = Path(path)
    meta_path = path if path.suffix == ".meta" else path.with_suffix(".meta")
    if not meta_path.exists():
        raise MalformedInputError(f"missing sidecar metadata file {meta_path}")
    fields: dict[str, str] = {}
    for lineno, line in enumerate(meta_path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedInputError(f"{meta_path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    missing = {"name", "dims", "dtype", "spacing"} - fields.keys()
    if missing:
        raise MalformedInputError(f"{meta_path}: missing keys {sorted(missing)}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split(","))
        spacing = tuple(float(v) for v in fields["spacing"].split(","))
    except ValueError as exc:
        raise MalformedInputError(f"{meta_path}: bad dims/spacing: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3:
        raise MalformedInputError(f"{meta_path}: dims and spacing must have 3 components")
    raw_path = meta_path.with_suffix(".raw")
    if path.suffix != ".meta":
        raw_path = path
    return load_volume(raw_path, dims, fields["dtype"], spacing, name=fields["name"])


def partition(vol: Volume, grid: tuple[int, int, int]) -> BlockGrid:
    """Split the volume into a regular grid of blocks; dims must divide evenly."""
    axes = "xyz"
    for axis in range(3):
        if grid[axis] <= 0:
            raise ConfigurationError(f"grid dims must be positive, got {grid}")
        if vol.dims[axis] % grid[axis] != 0:
            raise ConfigurationError(
                f"volume dim {axes[axis]}={vol.dims[axis]} is not divisible by "
                f"grid {axes[axis]}={grid[axis]}"
            )
    step = tuple(vol.dims[a] // grid[a] for a in range(3))
    wmin = vol.world_min
    sp = np.asarray(vol.spacing, dtype=float)
    blocks = []
    for i in range(grid[0]):
        for j in range(grid[1]):
            for k in range(grid[2]):
                lo = (i * step[0], j * step[1], k * step[2])
                hi = (lo[0] + step[0], lo[1] + step[1], lo[2] + step[2])
                world_lo = wmin + np.asarray(lo) * sp
                world_hi = wmin + np.asarray(hi) * sp
                sub = vol.voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
                blocks.append(Block(
                    index=(i, j, k),
                    lo=lo,
                    hi=hi,
                    world_lo=tuple(world_lo),
                    world_hi=tuple(world_hi),
                    center=tuple(0.5 * (world_lo + world_hi)),
                    mean_density=float(sub.mean()),
                    max_density=float(sub.max()),
                ))
    return BlockGrid(tuple(grid), tuple(blocks), volume_name=vol.name)


def block_voxels(vol: Volume, b: Block) -> np.ndarray:
    """Copy of the block's voxel subarray (shape == block extent)."""
    for axis in range(3):
        if not (0 <= b.lo[axis] and b.hi[axis] <= vol.dims[axis]):
            raise IndexError(f"block extent {b.lo}..{b.hi} outside volume dims {vol.dims}")
    return vol.voxels[b.lo[0]:b.hi[0], b.lo[1]:b.hi[1], b.lo[2]:b.hi[2]].copy()


def block_stats(vol: Volume, grid: BlockGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-block (means, maxes) in block array order."""
    means = np.array([b.mean_density for b in grid.blocks])
    maxes = np.array([b.max_density for b in grid.blocks])
    return means, maxes


@dataclass(frozen=True)
class TransferFunction:
    """Piecewise-linear map from scalar value in [0,1] to RGBA in [0,1]."""

    scalars: np.ndarray  # (K,), strictly increasing, scalars[0]=0, scalars[-1]=1
    rgba: np.ndarray  # (K, 4)

    def __post_init__(self):
        s, c = np.asarray(self.scalars, float), np.asarray(self.rgba, float)
        if s.ndim != 1 or c.shape != (s.size, 4):
            raise MalformedInputError("transfer function needs matching scalar and rgba lists")
        if s.size < 2 or np.any(np.diff(s) <= 0):
            raise MalformedInputError("transfer-function scalar keys must be strictly increasing")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise MalformedInputError("transfer-function keys must start at 0 and end at 1")
        if c.min() < 0.0 or c.max() > 1.0:
            raise MalformedInputError("transfer-function rgba components must lie in [0,1]")
        object.__setattr__(self, "scalars", s)
        object.__setattr__(self, "rgba", c)
        self.scalars.setflags(write=False)
        self.rgba.setflags(write=False)

    def lookup(self, values: np.ndarray) -> np.ndarray:
        """Interpolate RGBA for an array of scalars; returns shape (*values, 4)."""
        v = np.asarray(values, dtype=float)
        out = np.empty(v.shape + (4,))
        for ch in range(4):
            out[..., ch] = np.interp(v, self.scalars, self.rgba[:, ch])
        return out

    @staticmethod
    def from_points(points) -> "TransferFunction":
        pts = sorted(points, key=lambda p: p[0])
        return TransferFunction(np.array([p[0] for p in pts]),
                                np.array([p[1] for p in pts]))


def load_transfer_function(path: str | Path) -> TransferFunction:
    """Parse UTF-8 lines of ``scalar r g b a``."""
    points = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MalformedInputError(f"{path}:{lineno}: expected 'scalar r g b a', got {line!r}")
        try:
            nums = [float(p) for p in parts]
        except ValueError as exc:
            raise MalformedInputError(f"{path}:{lineno}: {exc}") from exc
        points.append((nums[0], tuple(nums[1:])))
    if not points:
        raise MalformedInputError(f"{path}: empty transfer function")
    return TransferFunction.from_points(points)


def save_transfer_function(tf: TransferFunction, path: str | Path) -> None:
    lines = [
        " ".join(repr(float(x)) for x in (s, *c))
        for s, c in zip(tf.scalars, tf.rgba)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
