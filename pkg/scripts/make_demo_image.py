#!/usr/bin/env python3
"""Generate a randomized victim image for the pipeline CLI.

Writes a manifest the CLI can load plus the matching ground-truth map file,
so a full run can be checked end to end:

    python3 scripts/make_demo_image.py --seed 7 --out images/
    python3 -m caveprobe --image-path images/demo.json \
        --ground-truth-path images/demo.maps --seed 1
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from caveprobe.synth import build_victim_image


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0,
                        help="layout randomization seed (default 0)")
    parser.add_argument("--out", type=Path, default=Path("."),
                        help="output directory (default current)")
    parser.add_argument("--name", default="demo",
                        help="basename for the written files (default demo)")
    parser.add_argument("--code-pages", type=int, default=4)
    parser.add_argument("--cave-pages", type=int, default=4)
    parser.add_argument("--stack-pages", type=int, default=4)
    parser.add_argument("--omit-gadget", action="append", default=[],
                        metavar="KIND",
                        help="leave out a gadget kind (repeatable); useful "
                             "for exercising the failure path")
    args = parser.parse_args(argv)

    image = build_victim_image(
        args.seed,
        code_pages=args.code_pages,
        cave_pages=args.cave_pages,
        stack_pages=args.stack_pages,
        omit_gadgets=tuple(args.omit_gadget),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = args.out / f"{args.name}.json"
    maps = args.out / f"{args.name}.maps"
    manifest.write_text(image.manifest_text)
    maps.write_text(image.maps_text)

    truth = image.truth
    print(f"wrote {manifest} and {maps}")
    print(f"  regions: {len(truth.regions)}, cave at {truth.cave_start:#x} "
          f"({truth.cave_len:#x} bytes)")
    print(f"  victim frame slot {truth.victim_slot:#x}, "
          f"return site {truth.return_site:#x}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
