"""Offline pipeline stages behind the CLI.

Each stage reads the artifacts of the previous one, does its work inside
the workspace directory, and finishes by writing a JSON manifest. Stages
check for their upstream manifest and name the missing command when it is
absent. All randomness is seeded from the config, and manifests carry no
timestamps, so rerunning a stage with unchanged inputs rewrites every file
byte for byte.
"""

from __future__ import annotations

import json
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import camera
from .block_encoder import (
    BlockEncoderModel,
    BlockTrainConfig,
    ImageRewardScorer,
    ViewScorer,
    load_block_encoder,
    save_block_encoder,
    train_block_encoder,
)
from .captions import BUILTIN_DESCRIPTORS, CaptionCache, external_caption, instruction_prompt, viewpoint_caption
from .config import ProjectConfig
from .embedding import (
    AlignmentConfig,
    AlignmentModel,
    ExternalProvider,
    PairedSample,
    ReferenceProvider,
    read_pairs_manifest,
    train_alignment,
    write_pairs_manifest,
)
from .errors import ConfigurationError, StageMissingError
from .nn import load_params
from .render import RenderSettings, load_png, render, render_png
from .rl import PolicyModel, PPOConfig, ViewpointEnv, best_viewpoint, train
from .volume import (
    TransferFunction,
    load_dataset,
    load_transfer_function,
    partition,
)

SAMPLE_MANIFEST = "manifest-sample.json"
RENDER_MANIFEST = "manifest-render.json"
CAPTION_MANIFEST = "manifest-caption.json"
ALIGN_MANIFEST = "manifest-align.json"
ENCODE_MANIFEST = "manifest-encode.json"
RL_MANIFEST = "manifest-rl.json"

VIEWPOINTS_FILE = "viewpoints.txt"
PAIRS_FILE = "pairs.tsv"
ALIGN_CKPT = "align.ckpt"
ENCODER_CKPT = "encoder.ckpt"
POLICY_CKPT = "policy.ckpt"
RL_LOG = "rl-log.tsv"
SWEEP_FILE = "sweep-blocks.tsv"


def make_provider(config: ProjectConfig):
    if config.provider.kind == "external":
        return ExternalProvider(config.provider.base_url,
                                timeout=config.provider.timeout_s,
                                retries=config.provider.retries)
    return ReferenceProvider()


def builtin_transfer_function(name: str) -> TransferFunction:
    ref = resources.files("volnav").joinpath(f"assets/tf/{name}.tf")
    if not ref.is_file():
        raise ConfigurationError(f"unknown built-in transfer function {name!r}")
    text = ref.read_text(encoding="utf-8")
    points = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        nums = [float(p) for p in line.split()]
        points.append((nums[0], tuple(nums[1:])))
    return TransferFunction.from_points(points)


def load_bundle(config: ProjectConfig):
    """Volume, block grid, and transfer function for the configured dataset."""
    vol = load_dataset(config.resolve(config.dataset.volume))
    grid = partition(vol, config.dataset.grid)
    name = config.dataset.transfer_function
    if not name:
        tf = builtin_transfer_function("gray_ramp")
    elif name.startswith("asset:"):
        tf = builtin_transfer_function(name.split(":", 1)[1])
    else:
        tf = load_transfer_function(config.resolve(name))
    return vol, grid, tf


def render_settings(config: ProjectConfig) -> RenderSettings:
    step = config.render.step if config.render.step > 0 else None
    return RenderSettings(step=step, background=config.render.background,
                          early_termination=config.render.early_termination)


def _write_manifest(workspace: Path, name: str, payload: dict) -> dict:
    path = workspace / name
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return payload


def _require_manifest(workspace: Path, name: str, command: str) -> dict:
    path = workspace / name
    if not path.exists():
        raise StageMissingError(f"missing artifact {path.name} in {workspace}",
                                run_first=command)
    return json.loads(path.read_text(encoding="utf-8"))


def _viewpoint_set(config: ProjectConfig, grid):
    workspace = config.workspace_dir
    text = (workspace / VIEWPOINTS_FILE).read_text(encoding="utf-8")
    return camera.deserialize_viewpoints(text, grid=grid)


def stage_sample(config: ProjectConfig) -> dict:
    """Uniform icosphere shell plus block-centered retargets; writes the set."""
    vol, grid, _ = load_bundle(config)
    workspace = config.workspace_dir
    workspace.mkdir(parents=True, exist_ok=True)
    depth = config.sampling.depth_factor * vol.bounding_radius
    uniform = camera.icosphere_viewpoints(config.sampling.level, depth)
    rng = np.random.default_rng(config.sampling.seed)
    block_ids = sorted(rng.choice(grid.block_count,
                                  size=min(config.sampling.block_count, grid.block_count),
                                  replace=False).tolist())
    targeted = camera.block_centered_viewpoints(
        uniform, [grid.blocks[i] for i in block_ids],
        config.sampling.dirs_per_block, rng_seed=config.sampling.seed,
    )
    combined = uniform.extend(targeted)
    (workspace / VIEWPOINTS_FILE).write_text(camera.serialize_viewpoints(combined),
                                             encoding="utf-8")
    return _write_manifest(workspace, SAMPLE_MANIFEST, {
        "stage": "sample",
        "dataset": config.dataset.name,
        "level": config.sampling.level,
        "uniform_count": len(uniform),
        "block_count": len(block_ids),
        "dirs_per_block": config.sampling.dirs_per_block,
        "blocks": block_ids,
        "total": len(combined),
        "seed": config.sampling.seed,
        "viewpoints_file": VIEWPOINTS_FILE,
    })


def _render_name(index: int) -> str:
    return f"renders/vp{index:05d}.png"


def stage_render(config: ProjectConfig) -> dict:
    vol, grid, tf = load_bundle(config)
    workspace = config.workspace_dir
    manifest = _require_manifest(workspace, SAMPLE_MANIFEST, "volnav sample")
    vps = _viewpoint_set(config, grid)
    (workspace / "renders").mkdir(exist_ok=True)
    settings = render_settings(config)
    size = (config.render.width, config.render.height)
    files = []
    for i, vp in enumerate(vps.viewpoints):
        frame = camera.to_camera_frame(vp, config.fov_radians, config.camera.aspect,
                                       vol.bounding_radius)
        name = _render_name(i)
        render_png(vol, tf, frame, settings, size, workspace / name)
        files.append(name)
    return _write_manifest(workspace, RENDER_MANIFEST, {
        "stage": "render-dataset",
        "count": len(files),
        "size": list(size),
        "files": files,
        "source": manifest["viewpoints_file"],
    })


def stage_caption(config: ProjectConfig) -> dict:
    vol, grid, _ = load_bundle(config)
    workspace = config.workspace_dir
    _require_manifest(workspace, RENDER_MANIFEST, "volnav render-dataset")
    vps = _viewpoint_set(config, grid)
    descriptor = BUILTIN_DESCRIPTORS.get(config.captions.descriptor)
    if descriptor is None:
        raise ConfigurationError(
            f"unknown caption descriptor {config.captions.descriptor!r}; "
            f"choose one of {sorted(BUILTIN_DESCRIPTORS)}"
        )
    d_min = config.camera.d_min_factor * vol.bounding_radius
    d_max = config.camera.d_max_factor * vol.bounding_radius
    provider = make_provider(config) if config.captions.mode == "external" else None
    cache = CaptionCache(workspace / "caption-cache") if provider else None
    samples = []
    for i, (vp, prov) in enumerate(zip(vps.viewpoints, vps.provenance)):
        image_rel = _render_name(i)
        if provider is not None:
            png_bytes = (workspace / image_rel).read_bytes()
            text = external_caption(provider, png_bytes,
                                    instruction_prompt(descriptor, i), cache)
        else:
            text = viewpoint_caption(descriptor, vp, prov, d_min, d_max, ordinal=i,
                                     grid_dims=grid.grid_dims)
        tag = "uniform" if prov.kind == "uniform" else (
            "block:" + ",".join(str(x) for x in prov.block_index))
        samples.append(PairedSample(image_rel, text, tag))
    write_pairs_manifest(workspace / PAIRS_FILE, samples)
    return _write_manifest(workspace, CAPTION_MANIFEST, {
        "stage": "caption",
        "mode": config.captions.mode,
        "descriptor": descriptor.name,
        "count": len(samples),
        "pairs_file": PAIRS_FILE,
    })


def stage_align(config: ProjectConfig) -> dict:
    workspace = config.workspace_dir
    _require_manifest(workspace, CAPTION_MANIFEST, "volnav caption")
    samples = read_pairs_manifest(workspace / PAIRS_FILE)
    resolved = [
        PairedSample(str(workspace / s.image_path), s.caption, s.provenance)
        for s in samples
    ]
    provider = make_provider(config)
    model = AlignmentModel(seed=config.alignment.seed)
    result = train_alignment(
        model, resolved, provider,
        AlignmentConfig(
            batch_size=config.alignment.batch_size,
            learning_rate=config.alignment.learning_rate,
            epochs=config.alignment.epochs,
            weight_decay=config.alignment.weight_decay,
            holdout_fraction=config.alignment.holdout_fraction,
            seed=config.alignment.seed,
            checkpoint_path=str(workspace / ALIGN_CKPT),
        ),
    )
    curve = "\n".join(f"{i}\t{v!r}" for i, v in enumerate(result.loss_curve))
    (workspace / "align-loss.tsv").write_text(curve + "\n" if curve else "",
                                              encoding="utf-8")
    return _write_manifest(workspace, ALIGN_MANIFEST, {
        "stage": "align",
        "provider": config.provider.kind,
        "epochs": config.alignment.epochs,
        "pairs": len(samples),
        "holdout_size": result.holdout_size,
        "retrieval_top1": result.retrieval_top1,
        "checkpoint": ALIGN_CKPT,
        "final_loss": result.loss_curve[-1] if result.loss_curve else None,
    })


def load_alignment(config: ProjectConfig) -> AlignmentModel:
    workspace = config.workspace_dir
    _require_manifest(workspace, ALIGN_MANIFEST, "volnav align")
    model = AlignmentModel(seed=config.alignment.seed)
    load_params(workspace / ALIGN_CKPT, model.params())
    return model


def stage_encode(config: ProjectConfig) -> dict:
    vol, grid, _ = load_bundle(config)
    workspace = config.workspace_dir
    _require_manifest(workspace, RENDER_MANIFEST, "volnav render-dataset")
    alignment = load_alignment(config)
    provider = make_provider(config)
    vps = _viewpoint_set(config, grid)
    base = np.stack([
        provider.embed_image(load_png(workspace / _render_name(i)))
        for i in range(len(vps))
    ])
    targets = alignment.project_images(base)
    model = BlockEncoderModel(
        pos_scale=config.camera.d_max_factor * vol.bounding_radius,
        lattice=config.encoder.lattice, seed=config.encoder.seed,
    )
    result = train_block_encoder(model, vol, grid, vps, targets, BlockTrainConfig(
        steps=config.encoder.steps,
        batch_size=config.encoder.batch_size,
        learning_rate=config.encoder.learning_rate,
        seed=config.encoder.seed,
        fov=config.fov_radians,
        aspect=config.camera.aspect,
    ))
    save_block_encoder(model, workspace / ENCODER_CKPT, meta={
        "grid_dims": list(grid.grid_dims),
        "provider": config.provider.kind,
        "dataset": config.dataset.name,
    })
    curve = "\n".join(f"{i}\t{v!r}" for i, v in enumerate(result.loss_curve))
    (workspace / "encoder-loss.tsv").write_text(curve + "\n" if curve else "",
                                                encoding="utf-8")
    return _write_manifest(workspace, ENCODE_MANIFEST, {
        "stage": "encode",
        "steps": config.encoder.steps,
        "viewpoints": len(vps),
        "final_loss": result.final_loss,
        "checkpoint": ENCODER_CKPT,
        "grid": list(grid.grid_dims),
    })


def _build_env(config: ProjectConfig, vol, grid, tf, encoder: BlockEncoderModel,
               reward_mode: str | None = None) -> ViewpointEnv:
    mode = reward_mode or config.rl.reward_mode
    if mode == "image":
        provider = make_provider(config)
        scorer = ImageRewardScorer(provider, vol, tf, render_settings(config),
                                   (config.render.width, config.render.height))
    else:
        scorer = ViewScorer(encoder, vol, grid)
    radius = vol.bounding_radius
    return ViewpointEnv(
        scorer, radius,
        fov=config.fov_radians, aspect=config.camera.aspect,
        horizon=config.rl.horizon, success_threshold=config.rl.success_threshold,
        d_min=config.camera.d_min_factor * radius,
        d_max=config.camera.d_max_factor * radius,
        start_level=config.sampling.level,
    )


def _ppo_config(config: ProjectConfig, episodes: int | None = None,
                checkpoint: str | None = None) -> PPOConfig:
    return PPOConfig(
        gamma=config.rl.gamma, gae_lambda=config.rl.gae_lambda,
        clip_epsilon=config.rl.clip_epsilon,
        epochs_per_batch=config.rl.epochs_per_batch,
        minibatch=config.rl.minibatch, horizon=config.rl.horizon,
        entropy_coef=config.rl.entropy_coef, value_coef=config.rl.value_coef,
        learning_rate=config.rl.learning_rate,
        max_episodes=episodes if episodes is not None else config.rl.episodes,
        seed=config.rl.seed, success_threshold=config.rl.success_threshold,
        episodes_per_batch=config.rl.episodes_per_batch,
        checkpoint_path=checkpoint,
    )


def _goal_pool(config: ProjectConfig, alignment: AlignmentModel, provider):
    workspace = config.workspace_dir
    samples = read_pairs_manifest(workspace / PAIRS_FILE)
    captions = sorted({s.caption for s in samples})
    base = np.stack([provider.embed_text(c) for c in captions])
    return captions, alignment.project_texts(base)


def stage_train_rl(config: ProjectConfig) -> dict:
    vol, grid, tf = load_bundle(config)
    workspace = config.workspace_dir
    _require_manifest(workspace, ENCODE_MANIFEST, "volnav encode")
    alignment = load_alignment(config)
    encoder, _ = load_block_encoder(workspace / ENCODER_CKPT)
    provider = make_provider(config)
    captions, goals = _goal_pool(config, alignment, provider)
    env = _build_env(config, vol, grid, tf, encoder)
    model = PolicyModel(seed=config.rl.seed)

    def factory(episode, rng):
        return env, goals[episode % len(goals)]

    result = train(factory, model, _ppo_config(config, checkpoint=str(workspace / POLICY_CKPT)))
    (workspace / RL_LOG).write_text("\n".join(result.log_lines) + "\n",
                                    encoding="utf-8")
    return _write_manifest(workspace, RL_MANIFEST, {
        "stage": "train-rl",
        "episodes": config.rl.episodes,
        "goals": len(goals),
        "reward_mode": config.rl.reward_mode,
        "best_mean_reward": result.best_mean_reward,
        "checkpoint": POLICY_CKPT,
        "log": RL_LOG,
    })


def load_policy(config: ProjectConfig) -> PolicyModel:
    workspace = config.workspace_dir
    _require_manifest(workspace, RL_MANIFEST, "volnav train-rl")
    model = PolicyModel(seed=config.rl.seed)
    load_params(workspace / POLICY_CKPT, model.params())
    return model


def stage_query(config: ProjectConfig, text: str, reward_mode: str | None = None,
                restarts: int | None = None, start=None,
                train_per_prompt: bool | None = None) -> dict:
    """Embed the instruction, optimize the viewpoint, render and report it."""
    if not text or not text.strip():
        raise ValueError("query text must be nonempty")
    vol, grid, tf = load_bundle(config)
    workspace = config.workspace_dir
    alignment = load_alignment(config)
    encoder, _ = load_block_encoder(workspace / ENCODER_CKPT)
    policy = load_policy(config)
    provider = make_provider(config)
    goal = alignment.project_texts(provider.embed_text(text)[None])[0]
    env = _build_env(config, vol, grid, tf, encoder, reward_mode)
    per_prompt = (config.rl.train_per_prompt if train_per_prompt is None
                  else train_per_prompt)
    if per_prompt:
        train(env, policy, _ppo_config(config, episodes=config.rl.prompt_episodes),
              goal=goal)
    best = best_viewpoint(policy, env, goal,
                          restarts=restarts or config.rl.restarts,
                          start=start, seed=config.rl.seed)
    frame = camera.to_camera_frame(best.viewpoint, config.fov_radians,
                                   config.camera.aspect, vol.bounding_radius)
    png = workspace / "query.png"
    render_png(vol, tf, frame, render_settings(config),
               (config.render.width, config.render.height), png)
    recheck = env.reward_of(best.viewpoint, goal)
    return {
        "text": text,
        "viewpoint": {
            "orientation": list(best.viewpoint.orientation),
            "depth": best.viewpoint.depth,
            "look_at": list(best.viewpoint.look_at),
        },
        "reward": best.reward,
        "reward_recheck": recheck,
        "image": str(png),
        "trajectory_length": len(best.trajectory),
    }


def stage_sweep_blocks(config: ProjectConfig) -> list[dict]:
    """Train-and-score the encoder across block-grid resolutions.

    Targets and the probe goal both go through the trained alignment heads
    so per-grid rewards are comparable cosines in one embedding space.
    """
    vol, _, tf = load_bundle(config)
    workspace = config.workspace_dir
    workspace.mkdir(parents=True, exist_ok=True)
    provider = make_provider(config)
    alignment = load_alignment(config)
    descriptor = BUILTIN_DESCRIPTORS.get(config.captions.descriptor,
                                         BUILTIN_DESCRIPTORS["generic"])
    d_max = config.camera.d_max_factor * vol.bounding_radius
    probe = camera.icosphere_viewpoints(config.sweep.probe_level,
                                        config.sampling.depth_factor * vol.bounding_radius)
    goal_text = f"{descriptor.subject} overall structure"
    goal_base = alignment.project_texts(provider.embed_text(goal_text)[None])[0]

    image_base = []
    for vp in probe.viewpoints:
        frame = camera.to_camera_frame(vp, config.fov_radians,
                                       config.camera.aspect, vol.bounding_radius)
        img = render(vol, tf, frame, render_settings(config), (64, 64))
        image_base.append(provider.embed_image(img))
    targets_all = alignment.project_images(np.stack(image_base))

    rows = []
    for g in config.sweep.grids:
        grid = partition(vol, (g, g, g))
        targets = list(targets_all)
        model = BlockEncoderModel(pos_scale=d_max, lattice=config.encoder.lattice,
                                  seed=config.encoder.seed)
        result = train_block_encoder(model, vol, grid, probe, np.stack(targets),
                                     BlockTrainConfig(steps=config.sweep.steps,
                                                      learning_rate=config.encoder.learning_rate,
                                                      seed=config.encoder.seed,
                                                      fov=config.fov_radians,
                                                      aspect=config.camera.aspect))
        scorer = ViewScorer(model, vol, grid)
        t0 = time.perf_counter()
        rewards = [
            scorer.reward(camera.to_camera_frame(vp, config.fov_radians,
                                                 config.camera.aspect,
                                                 vol.bounding_radius), goal_base)
            for vp in probe.viewpoints
        ]
        elapsed_ms = (time.perf_counter() - t0) * 1000.0 / len(probe)
        rows.append({
            "grid": f"{g}x{g}x{g}",
            "blocks": grid.block_count,
            "mean_reward": float(np.mean(rewards)),
            "best_reward": float(np.max(rewards)),
            "train_loss": result.final_loss,
            "eval_ms_per_view": elapsed_ms,
        })
    lines = ["grid\tblocks\tmean_reward\tbest_reward\ttrain_loss\teval_ms_per_view"]
    for r in rows:
        lines.append(f"{r['grid']}\t{r['blocks']}\t{r['mean_reward']:.6f}"
                     f"\t{r['best_reward']:.6f}\t{r['train_loss']:.6f}"
                     f"\t{r['eval_ms_per_view']:.3f}")
    (workspace / SWEEP_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
