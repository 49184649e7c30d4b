"""Semantic block encoding: per-block features fused with camera-space
position, average-pooled over the visibility set into one view embedding.

Blocks are trilinearly resampled onto a fixed lattice before the feature
net, so a single model serves every block-size configuration. The camera
sees a block's contribution change with viewpoint only through its
camera-space position and through membership of the visibility set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraFrame, project_block, visible_blocks
from .errors import ConfigurationError, NumericError
from .nn import (
    AdamW,
    Conv3d,
    Dense,
    GlobalAvgPool3d,
    Network,
    Relu,
    load_params,
    save_checkpoint,
)
from .volume import BlockGrid, Volume, block_voxels

EMBED_DIM = 768
FEATURE_DIM = 128
POS_DIM = 32
DEFAULT_LATTICE = 16


def resample_lattice(arr: np.ndarray, lattice: int = DEFAULT_LATTICE) -> np.ndarray:
    """Trilinear resample of a dense sub-volume onto a cubic lattice.

    Cell-center aligned: a lattice the same size as the input is returned
    unchanged, and constant inputs stay exactly constant.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3d block, got shape {arr.shape}")
    if arr.shape == (lattice, lattice, lattice):
        return arr.copy()
    dims = np.asarray(arr.shape)
    axes = [
        np.clip((np.arange(lattice) + 0.5) * dims[a] / lattice - 0.5, 0, dims[a] - 1)
        for a in range(3)
    ]
    u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    i0 = np.minimum(np.floor(u).astype(np.intp), np.maximum(dims - 2, 0))
    frac = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    c00 = arr[x0, y0, z0] * (1 - fx) + arr[x1, y0, z0] * fx
    c10 = arr[x0, y1, z0] * (1 - fx) + arr[x1, y1, z0] * fx
    c01 = arr[x0, y0, z1] * (1 - fx) + arr[x1, y0, z1] * fx
    c11 = arr[x0, y1, z1] * (1 - fx) + arr[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return out.reshape(lattice, lattice, lattice)


class BlockEncoderModel:
    """Feature, positional, and fusion nets producing 768-dim block embeddings."""

    def __init__(self, pos_scale: float, lattice: int = DEFAULT_LATTICE, seed: int = 0):
        if pos_scale <= 0:
            raise ConfigurationError(f"pos_scale must be positive, got {pos_scale}")
        if lattice < 7:
            raise ConfigurationError(
                f"lattice {lattice} too small for two stride-2 kernel-3 convolutions"
            )
        rng = np.random.default_rng(seed)
        self.pos_scale = float(pos_scale)
        self.lattice = lattice
        self.feature_net = Network([
            Conv3d(1, 8, kernel=3, stride=2, rng=rng, name="enc.feat.conv1"), Relu(),
            Conv3d(8, 16, kernel=3, stride=2, rng=rng, name="enc.feat.conv2"), Relu(),
            GlobalAvgPool3d(),
            Dense(16, FEATURE_DIM, rng, name="enc.feat.fc"),
        ], name="feature-net")
        self.pos_net = Network([
            Dense(3, POS_DIM, rng, name="enc.pos.fc1"), Relu(),
            Dense(POS_DIM, POS_DIM, rng, name="enc.pos.fc2"),
        ], name="positional-net")
        self.fusion_net = Network([
            Dense(FEATURE_DIM + POS_DIM, 512, rng, name="enc.fuse.fc1"), Relu(),
            Dense(512, EMBED_DIM, rng, name="enc.fuse.fc2"),
        ], name="fusion-net")

    def params(self):
        return (self.feature_net.params() + self.pos_net.params()
                + self.fusion_net.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def snapshot(self):
        return [p.values.copy() for p in self.params()]

    def restore(self, snap):
        for p, values in zip(self.params(), snap):
            p.values[...] = values

    def encode_batch(self, lattices: np.ndarray, positions: np.ndarray):
        """Embed n blocks given (n, L, L, L) voxels and (n, 3) camera positions."""
        feats, f_caches = self.feature_net.forward(lattices[:, None, :, :, :])
        pos, p_caches = self.pos_net.forward(positions / self.pos_scale)
        fused, u_caches = self.fusion_net.forward(np.concatenate([feats, pos], axis=1))
        return fused, (f_caches, p_caches, u_caches)

    def backward_batch(self, caches, grad_out: np.ndarray) -> None:
        f_caches, p_caches, u_caches = caches
        grad_cat = self.fusion_net.backward(u_caches, grad_out)
        self.feature_net.backward(f_caches, grad_cat[:, :FEATURE_DIM])
        self.pos_net.backward(p_caches, grad_cat[:, FEATURE_DIM:])


@dataclass(frozen=True)
class ViewEmbedding:
    vector: np.ndarray  # (768,)
    block_ids: tuple[int, ...]  # indices into grid.blocks
    empty: bool = False


class BlockEncodingContext:
    """Precomputed lattice stack for one (volume, grid) pair.

    Repeated reward evaluations (the RL inner loop) reuse the resampled
    blocks instead of touching the raw voxels every step.
    """

    def __init__(self, vol: Volume, grid: BlockGrid, lattice: int = DEFAULT_LATTICE):
        self.vol = vol
        self.grid = grid
        self.lattice = lattice
        self.lattices = np.stack([
            resample_lattice(block_voxels(vol, b), lattice) for b in grid.blocks
        ])
        self.centers = np.array([b.center for b in grid.blocks])


def encode_block(model: BlockEncoderModel, blockvoxels: np.ndarray,
                 p_ij: np.ndarray) -> np.ndarray:
    """Embedding of a single block at a camera-space position."""
    p = np.asarray(p_ij, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"camera-space position must be a finite 3-vector, got {p}")
    lat = resample_lattice(blockvoxels, model.lattice)
    fused, _ = model.encode_batch(lat[None], p[None])
    return fused[0]


def pool_view_embedding(block_embeddings: np.ndarray, block_ids) -> np.ndarray:
    """Average pooling reduced in ascending block-id order.

    Fixing the summation order makes the pooled vector exactly independent
    of how the visibility set happened to be enumerated.
    """
    ids = np.asarray(block_ids)
    if len(ids) != len(block_embeddings) or len(ids) == 0:
        raise ValueError("need one embedding per visible block")
    order = np.argsort(ids, kind="stable")
    total = np.zeros(block_embeddings.shape[1])
    for i in order:
        total += block_embeddings[i]
    return total / len(ids)


def encode_view(model: BlockEncoderModel, vol: Volume, grid: BlockGrid,
                frame: CameraFrame, context: BlockEncodingContext | None = None) -> ViewEmbedding:
    """Average-pooled embedding over the blocks visible from ``frame``."""
    if context is None:
        context = BlockEncodingContext(vol, grid, model.lattice)
    vis = visible_blocks(grid, frame)
    if not vis:
        return ViewEmbedding(np.zeros(EMBED_DIM), (), empty=True)
    positions = np.stack([project_block(grid.blocks[i], frame) for i in vis])
    fused, _ = model.encode_batch(context.lattices[vis], positions)
    return ViewEmbedding(pool_view_embedding(fused, vis), tuple(vis))


def cosine_loss(e: np.ndarray, target: np.ndarray):
    """1 - cos(e, target) and its gradient with respect to ``e``."""
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    en, tn = float(np.linalg.norm(e)), float(np.linalg.norm(t))
    if en < 1e-12 or tn < 1e-12:
        raise NumericError("cosine loss undefined for zero-norm embeddings")
    u, v = e / en, t / tn
    loss = 1.0 - float(u @ v)
    grad = -(v - (u @ v) * u) / en
    return loss, grad


def reward_block(model: BlockEncoderModel, vol: Volume, grid: BlockGrid,
                 frame: CameraFrame, goal: np.ndarray,
                 context: BlockEncodingContext | None = None) -> float:
    """Cosine similarity between the view embedding and the goal.

    An empty visibility set scores -1 so an agent staring into space is
    pushed back toward the volume.
    """
    goal = np.asarray(goal, dtype=np.float64)
    if not np.all(np.isfinite(goal)) or float(np.linalg.norm(goal)) < 1e-12:
        raise ValueError("goal embedding must be finite and nonzero")
    ve = encode_view(model, vol, grid, frame, context)
    if ve.empty:
        return -1.0
    u = ve.vector / np.linalg.norm(ve.vector)
    v = goal / np.linalg.norm(goal)
    return float(np.clip(u @ v, -1.0, 1.0))


def reward_image(provider, image, goal: np.ndarray) -> float:
    """Ablation reward: embed the rendered image instead of the blocks."""
    goal = np.asarray(goal, dtype=np.float64)
    emb = provider.embed_image(image)
    u = emb / np.linalg.norm(emb)
    v = goal / np.linalg.norm(goal)
    return float(np.clip(u @ v, -1.0, 1.0))


@dataclass
class BlockTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    fov: float = 0.7853981633974483  # 45 degrees
    aspect: float = 1.0


@dataclass
class BlockTrainResult:
    loss_curve: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1] if self.loss_curve else float("nan")


def train_block_encoder(model: BlockEncoderModel, vol: Volume, grid: BlockGrid,
                        viewpoints, targets: np.ndarray,
                        config: BlockTrainConfig = BlockTrainConfig()) -> BlockTrainResult:
    """Fit the encoder so pooled view embeddings match per-viewpoint targets.

    Within a step, block features are computed once per distinct block and
    shared across the viewpoints that see it; the positional and fusion nets
    run on one concatenated (viewpoint, block) batch.
    """
    from .camera import to_camera_frame

    vps = list(getattr(viewpoints, "viewpoints", viewpoints))
    targets = np.asarray(targets, dtype=np.float64)
    if len(vps) != len(targets):
        raise ValueError(f"{len(vps)} viewpoints but {len(targets)} targets")
    context = BlockEncodingContext(vol, grid, model.lattice)
    radius = vol.bounding_radius
    frames = [to_camera_frame(v, config.fov, config.aspect, radius) for v in vps]
    vis_sets = [sorted(visible_blocks(grid, f)) for f in frames]
    usable = [i for i, vis in enumerate(vis_sets) if vis]
    if not usable:
        raise ConfigurationError("every viewpoint has an empty visibility set")
    positions_per_vp = [
        np.stack([project_block(grid.blocks[j], frames[i]) for j in vis_sets[i]])
        if vis_sets[i] else None
        for i in range(len(vps))
    ]

    optimizer = AdamW(model.params(), lr=config.learning_rate,
                      weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = BlockTrainResult()
    for _ in range(config.steps):
        batch = rng.choice(usable, size=min(config.batch_size, len(usable)),
                           replace=False)
        unique_blocks = sorted({j for i in batch for j in vis_sets[i]})
        block_row = {j: r for r, j in enumerate(unique_blocks)}
        pair_block_rows = np.array([block_row[j] for i in batch for j in vis_sets[i]])
        pair_positions = np.concatenate([positions_per_vp[i] for i in batch])
        spans = np.cumsum([0] + [len(vis_sets[i]) for i in batch])

        feats, f_caches = model.feature_net.forward(
            context.lattices[unique_blocks][:, None, :, :, :]
        )
        pos, p_caches = model.pos_net.forward(pair_positions / model.pos_scale)
        fused, u_caches = model.fusion_net.forward(
            np.concatenate([feats[pair_block_rows], pos], axis=1)
        )

        model.zero_grad()
        losses = []
        grad_fused = np.empty_like(fused)
        for n, i in enumerate(batch):
            rows = slice(spans[n], spans[n + 1])
            e_hat = pool_view_embedding(fused[rows], vis_sets[i])
            loss, grad_e = cosine_loss(e_hat, targets[i])
            losses.append(loss)
            grad_fused[rows] = grad_e / (len(vis_sets[i]) * len(batch))
        grad_cat = model.fusion_net.backward(u_caches, grad_fused)
        model.pos_net.backward(p_caches, grad_cat[:, FEATURE_DIM:])
        grad_feats = np.zeros_like(feats)
        np.add.at(grad_feats, pair_block_rows, grad_cat[:, :FEATURE_DIM])
        model.feature_net.backward(f_caches, grad_feats)
        optimizer.step()
        result.loss_curve.append(float(np.mean(losses)))
    return result


class ViewScorer:
    """Fast view embedding/reward for a frozen model.

    Block features are precomputed once, so scoring a frame only runs the
    positional and fusion nets over the visible blocks. Build a new scorer
    if the model trains further.
    """

    def __init__(self, model: BlockEncoderModel, vol: Volume, grid: BlockGrid):
        self.model = model
        self.vol = vol
        self.grid = grid
        context = BlockEncodingContext(vol, grid, model.lattice)
        self.features, _ = model.feature_net.forward(
            context.lattices[:, None, :, :, :]
        )

    def embed(self, frame: CameraFrame) -> ViewEmbedding:
        vis = sorted(visible_blocks(self.grid, frame))
        if not vis:
            return ViewEmbedding(np.zeros(EMBED_DIM), (), empty=True)
        positions = np.stack([project_block(self.grid.blocks[i], frame) for i in vis])
        pos, _ = self.model.pos_net.forward(positions / self.model.pos_scale)
        fused, _ = self.model.fusion_net.forward(
            np.concatenate([self.features[vis], pos], axis=1)
        )
        return ViewEmbedding(pool_view_embedding(fused, vis), tuple(vis))

    def reward(self, frame: CameraFrame, goal: np.ndarray) -> float:
        ve = self.embed(frame)
        if ve.empty:
            return -1.0
        u = ve.vector / np.linalg.norm(ve.vector)
        v = np.asarray(goal) / np.linalg.norm(goal)
        return float(np.clip(u @ v, -1.0, 1.0))


class ImageRewardScorer:
    """Ablation-mode scorer: render the frame, embed the image, take cosine.

    Interface-identical to :class:`ViewScorer`, so the reward mode is purely
    a matter of which scorer the environment holds.
    """

    def __init__(self, provider, vol: Volume, tf, settings=None, size=(256, 256)):
        from .render import RenderSettings, render

        self._render = render
        self.provider = provider
        self.vol = vol
        self.tf = tf
        self.settings = settings if settings is not None else RenderSettings()
        self.size = size

    def reward(self, frame: CameraFrame, goal: np.ndarray) -> float:
        img = self._render(self.vol, self.tf, frame, self.settings, self.size)
        return reward_image(self.provider, img, goal)


def save_block_encoder(model: BlockEncoderModel, path: str | Path,
                       meta: dict | None = None) -> Path:
    """Checkpoint plus a JSON manifest describing shapes and provenance."""
    path = Path(path)
    save_checkpoint(path, model.params())
    manifest = {
        "pos_scale": model.pos_scale,
        "lattice": model.lattice,
        "feature_dim": FEATURE_DIM,
        "pos_dim": POS_DIM,
        "embed_dim": EMBED_DIM,
    }
    manifest.update(meta or {})
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def load_block_encoder(path: str | Path) -> tuple[BlockEncoderModel, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    model = BlockEncoderModel(pos_scale=manifest["pos_scale"],
                              lattice=manifest["lattice"])
    load_params(path, model.params())
    return model, manifest
