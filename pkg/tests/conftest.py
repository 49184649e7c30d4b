from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import smooth_blob_volume  # noqa: E402
from volnav import pipeline  # noqa: E402
from volnav.config import load_config  # noqa: E402
from volnav.volume import save_volume  # noqa: E402

TOY_TOML = """
[dataset]
name = "toy"
volume = "toy.raw"
grid = [2, 2, 2]

[sampling]
level = 1
block_count = 8
dirs_per_block = 10
seed = 7

[render]
width = 32
height = 32

[alignment]
epochs = 6
holdout_fraction = 0.2
seed = 1

[encoder]
steps = 150
lattice = 8
seed = 2

[rl]
episodes = 24
episodes_per_batch = 8
horizon = 16
seed = 3
restarts = 2

[sweep]
grids = [2, 4, 8]
steps = 40
probe_level = 0

[workspace]
dir = "runs"
"""


def write_toy_project(root: Path, toml_text: str = TOY_TOML, n: int = 32) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    save_volume(smooth_blob_volume(n, seed=3), root / "toy.raw", dtype="u8")
    config_path = root / "volnav.toml"
    config_path.write_text(toml_text, encoding="utf-8")
    return config_path


@pytest.fixture(scope="session")
def toy_project(tmp_path_factory):
    """A fully trained tiny project: all pipeline stages already run."""
    root = tmp_path_factory.mktemp("toyproj")
    config_path = write_toy_project(root)
    config = load_config(config_path)
    pipeline.stage_sample(config)
    pipeline.stage_render(config)
    pipeline.stage_caption(config)
    pipeline.stage_align(config)
    pipeline.stage_encode(config)
    pipeline.stage_train_rl(config)
    return config_path
