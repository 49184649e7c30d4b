"""Command-line entry point driving the full pipeline.

Stages in order: sample -> render-dataset -> caption -> align -> encode ->
train-rl -> query. `sweep-blocks` reruns the encoder across grid sizes and
`serve` starts the HTTP service.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import load_config
from .errors import VolnavError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volnav",
                                     description="Language-driven volume exploration")
    parser.add_argument("--config", default="volnav.toml",
                        help="path to the project TOML config")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("sample", help="sample uniform + block-centered viewpoints")
    sub.add_parser("render-dataset", help="render every sampled viewpoint to PNG")
    sub.add_parser("caption", help="caption every rendered viewpoint")
    sub.add_parser("align", help="train the image/text projection heads")
    sub.add_parser("encode", help="train the semantic block encoder")
    sub.add_parser("train-rl", help="train the PPO viewpoint policy")

    query = sub.add_parser("query", help="find the viewpoint matching an instruction")
    query.add_argument("text", help="natural-language instruction")
    query.add_argument("--reward-mode", choices=["block", "image"], default=None)
    query.add_argument("--restarts", type=int, default=None)
    query.add_argument("--train-per-prompt", action="store_true", default=None,
                       help="run a short PPO budget for this prompt before querying")
    query.add_argument("--seed", type=int, default=None,
                       help="override the RL seed for this query")

    sub.add_parser("sweep-blocks", help="compare block-grid resolutions")

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--listen", default=None, help="addr:port to bind")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
    except (VolnavError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "sample":
            manifest = pipeline.stage_sample(config)
            print(f"sampled {manifest['total']} viewpoints "
                  f"({manifest['uniform_count']} uniform + "
                  f"{manifest['total'] - manifest['uniform_count']} block-centered)")
        elif args.command == "render-dataset":
            manifest = pipeline.stage_render(config)
            print(f"rendered {manifest['count']} images at "
                  f"{manifest['size'][0]}x{manifest['size'][1]}")
        elif args.command == "caption":
            manifest = pipeline.stage_caption(config)
            print(f"captioned {manifest['count']} images ({manifest['mode']} mode)")
        elif args.command == "align":
            manifest = pipeline.stage_align(config)
            print(f"alignment trained for {manifest['epochs']} epochs; "
                  f"held-out retrieval top-1 = {manifest['retrieval_top1']:.3f}")
        elif args.command == "encode":
            manifest = pipeline.stage_encode(config)
            print(f"block encoder trained {manifest['steps']} steps; "
                  f"final cosine loss = {manifest['final_loss']:.4f}")
        elif args.command == "train-rl":
            manifest = pipeline.stage_train_rl(config)
            print(f"policy trained for {manifest['episodes']} episodes; "
                  f"best mean reward = {manifest['best_mean_reward']:.3f}")
        elif args.command == "query":
            if args.seed is not None:
                config.rl.seed = args.seed
            result = pipeline.stage_query(config, args.text,
                                          reward_mode=args.reward_mode,
                                          restarts=args.restarts,
                                          train_per_prompt=args.train_per_prompt)
            print(json.dumps(result, indent=2))
        elif args.command == "sweep-blocks":
            rows = pipeline.stage_sweep_blocks(config)
            for row in rows:
                print(f"{row['grid']:>8}: blocks={row['blocks']:<4} "
                      f"mean_reward={row['mean_reward']:.4f} "
                      f"eval={row['eval_ms_per_view']:.2f} ms/view")
        elif args.command == "serve":
            from .service import serve as run_service

            run_service(config, listen=args.listen)
    except VolnavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
