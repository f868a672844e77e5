"""Assemble the default desk-scale corpus from the local CPython stdlib.

Roughly 10 MB of real, locally available text (the interpreter's own .py
sources, test trees excluded), tokenized byte-level into train/val caches.
Deterministic given the same interpreter version; the resulting digests are
recorded in each run's metadata.

Usage: python scripts/make_corpus.py [--out corpus] [--val-fraction 0.0625]
"""

import argparse
import sysconfig
from pathlib import Path

from incgpt.data import ingest_to_dir


def stdlib_sources():
    std = Path(sysconfig.get_path("stdlib"))
    return sorted(
        p for p in std.rglob("*.py")
        if "test" not in p.parts and "site-packages" not in p.parts
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="corpus")
    ap.add_argument("--val-fraction", type=float, default=0.0625)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    files = stdlib_sources()
    train, val = ingest_to_dir(files, args.out, args.val_fraction, args.seed)
    print(f"{len(files)} source files")
    print(f"train: {len(train)} tokens, {train.n_docs} docs, "
          f"digest {train.source_digest}")
    print(f"val:   {len(val)} tokens, {val.n_docs} docs, "
          f"digest {val.source_digest}")


if __name__ == "__main__":
    main()
