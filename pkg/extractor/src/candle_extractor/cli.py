"""`candle-extract`: image-folder dataset -> CNDP image/text packs."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="candle-extract",
        description="Run a frozen CLIP-style encoder over an image-folder dataset.",
    )
    parser.add_argument("--root", required=True, help="dataset root, one subdirectory per class")
    parser.add_argument("--model", default="vit-b16-seeded",
                        help="vit-b16-seeded | tiny-seeded | hub id / local path")
    parser.add_argument("--template", default="a photo of a {class}")
    parser.add_argument("--out", required=True)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)

    from .extract import ExtractJob, run_job

    try:
        manifest = run_job(ExtractJob(
            root=Path(args.root), model=args.model, template=args.template,
            out_dir=Path(args.out), batch_size=args.batch_size, device=args.device,
        ))
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {', '.join(manifest['outputs'])} (dim={manifest['embedding_dim']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
