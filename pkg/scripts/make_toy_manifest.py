"""Regenerate the bundled toy manifest (byte-deterministic)."""
import argparse
from pathlib import Path

from todinv.toydata import toy_manifest_path, write_toy_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=toy_manifest_path().parent)
    args = ap.parse_args()
    print(write_toy_manifest(args.out))


if __name__ == "__main__":
    main()
