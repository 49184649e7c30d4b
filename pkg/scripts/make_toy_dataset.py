#!/usr/bin/env python3
"""Synthesize a small demo volume plus a ready-to-run project config."""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from volnav.volume import Volume, save_volume

CONFIG = """
[dataset]
name = "toy"
volume = "toy.raw"
grid = [2, 2, 2]

[sampling]
level = 2
block_count = 8
dirs_per_block = 10

[render]
width = 128
height = 128

[alignment]
epochs = 40

[encoder]
steps = 800
lattice = 8

[rl]
episodes = 300
episodes_per_batch = 16
gamma = 0.9

[workspace]
dir = "runs"
"""


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("out", nargs="?", default="toy-project")
    parser.add_argument("--size", type=int, default=48)
    parser.add_argument("--seed", type=int, default=3)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.size
    rng = np.random.default_rng(args.seed)
    coords = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    center = (n - 1) / 2.0
    field = np.zeros((n, n, n))
    for _ in range(4):
        pos = center + rng.uniform(-0.22 * n, 0.22 * n, size=3)
        sigma = rng.uniform(0.06 * n, 0.12 * n)
        field += rng.uniform(0.4, 1.0) * np.exp(
            -np.sum((coords - pos) ** 2, axis=-1) / (2 * sigma**2))
    field *= np.sum((coords - center) ** 2, axis=-1) <= (0.42 * n) ** 2
    field /= max(field.max(), 1e-9)

    save_volume(Volume((n, n, n), (1.0, 1.0, 1.0), field, name="toy"),
                out / "toy.raw", dtype="u8")
    (out / "volnav.toml").write_text(CONFIG.lstrip(), encoding="utf-8")
    print(f"wrote {out}/toy.raw, {out}/toy.meta, {out}/volnav.toml")
    print(f"next: cd {out} && volnav sample && volnav render-dataset && ...")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
