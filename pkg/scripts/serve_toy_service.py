#!/usr/bin/env python3
"""Build (once) and serve a tiny volnav project for UI integration tests.

The workspace is cached under --cache so repeated runs skip straight to
serving. Stages are idempotent, so a partial cache is simply completed.
"""

from __future__ import annotations

import argparse
import sys
import threading
from pathlib import Path

import numpy as np


def smooth_blob(n=32, seed=3, bumps=3):
    rng = np.random.default_rng(seed)
    coords = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    center = (n - 1) / 2.0
    field = np.zeros((n, n, n))
    for _ in range(bumps):
        pos = center + rng.uniform(-0.22 * n, 0.22 * n, size=3)
        sigma = rng.uniform(0.06 * n, 0.12 * n)
        field += rng.uniform(0.4, 1.0) * np.exp(
            -np.sum((coords - pos) ** 2, axis=-1) / (2 * sigma**2))
    field *= np.sum((coords - center) ** 2, axis=-1) <= (0.42 * n) ** 2
    return field / max(field.max(), 1e-9)


TOML = """
[dataset]
name = "toy"
volume = "toy.raw"
grid = [2, 2, 2]

[sampling]
level = 1
block_count = 8
dirs_per_block = 10

[render]
width = 64
height = 64

[alignment]
epochs = 6

[encoder]
steps = 150
lattice = 8

[rl]
episodes = 24
episodes_per_batch = 8
horizon = 16
restarts = 2

[workspace]
dir = "runs"
"""


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument("--cache", default="/tmp/volnav-ui-toy")
    args = parser.parse_args()

    from volnav import pipeline
    from volnav.config import load_config
    from volnav.service import NavigatorState, create_app
    from volnav.volume import Volume, save_volume

    cache = Path(args.cache)
    cache.mkdir(parents=True, exist_ok=True)
    config_path = cache / "volnav.toml"
    if not config_path.exists():
        config_path.write_text(TOML, encoding="utf-8")
    if not (cache / "toy.raw").exists():
        save_volume(Volume((32, 32, 32), (1.0, 1.0, 1.0), smooth_blob()),
                    cache / "toy.raw", dtype="u8")
    config = load_config(config_path)

    workspace = config.workspace_dir
    if not (workspace / pipeline.RL_MANIFEST).exists():
        print("building toy workspace (first run only)...", flush=True)
        pipeline.stage_sample(config)
        pipeline.stage_render(config)
        pipeline.stage_caption(config)
        pipeline.stage_align(config)
        pipeline.stage_encode(config)
        pipeline.stage_train_rl(config)

    import uvicorn

    state = NavigatorState(config)
    app = create_app(state)
    threading.Thread(target=state.load, daemon=True).start()
    uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
