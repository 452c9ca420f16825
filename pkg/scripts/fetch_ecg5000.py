#!/usr/bin/env python3
"""Fetch the ECG5000 dataset and normalize it to tab-separated files.

Downloads the per-dataset zip from timeseriesclassification.com (or reads a
local zip / directory), converts the whitespace-delimited train and test
files to TSV, and writes ECG5000_TRAIN.tsv / ECG5000_TEST.tsv into the
output directory. The benchmark sweep and the ECG acceptance test look for
exactly those files.
"""

import argparse
import io
import os
import sys
import urllib.request
import zipfile

URLS = [
    "https://www.timeseriesclassification.com/aeon-toolkit/ECG5000.zip",
    "https://www.timeseriesclassification.com/Downloads/ECG5000.zip",
]
PARTS = ("TRAIN", "TEST")


def _normalize(text: str) -> str:
    """Whitespace-delimited rows (one leading label + 140 values) to TSV."""
    rows = []
    for line in text.splitlines():
        cells = line.split()
        if cells:
            rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"


def _from_zip(blob: bytes, out_dir: str) -> None:
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        names = zf.namelist()
        for part in PARTS:
            member = next(
                (n for n in names
                 if n.upper().endswith(f"ECG5000_{part}.TXT")
                 or n.upper().endswith(f"ECG5000_{part}.TSV")), None)
            if member is None:
                raise SystemExit(f"no ECG5000_{part} text file in the archive "
                                 f"(found {names})")
            text = zf.read(member).decode("utf-8")
            _write(out_dir, part, text)


def _from_dir(src: str, out_dir: str) -> None:
    for part in PARTS:
        for ext in (".tsv", ".txt", ".csv"):
            path = os.path.join(src, f"ECG5000_{part}{ext}")
            if os.path.exists(path):
                with open(path, encoding="utf-8") as fh:
                    _write(out_dir, part, fh.read())
                break
        else:
            raise SystemExit(f"ECG5000_{part} not found under {src}")


def _write(out_dir: str, part: str, text: str) -> None:
    dest = os.path.join(out_dir, f"ECG5000_{part}.tsv")
    with open(dest, "w", encoding="utf-8") as fh:
        fh.write(_normalize(text))
    n = sum(1 for _ in open(dest, encoding="utf-8"))
    print(f"wrote {dest} ({n} rows)")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ECG5000",
                    help="output directory (default data/ECG5000)")
    ap.add_argument("--from-zip", help="use a local ECG5000.zip instead of downloading")
    ap.add_argument("--source-dir", help="copy/convert from a directory that already "
                                         "holds ECG5000_TRAIN/<TEST> files")
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)

    if args.source_dir:
        _from_dir(args.source_dir, args.out)
        return 0
    if args.from_zip:
        with open(args.from_zip, "rb") as fh:
            _from_zip(fh.read(), args.out)
        return 0
    last_err = None
    for url in URLS:
        try:
            print(f"downloading {url} ...")
            with urllib.request.urlopen(url, timeout=120) as resp:
                _from_zip(resp.read(), args.out)
            return 0
        except Exception as exc:  # try the mirror before giving up
            last_err = exc
            print(f"  failed: {exc}", file=sys.stderr)
    print("could not download ECG5000; pass --from-zip or --source-dir",
          file=sys.stderr)
    raise SystemExit(1)


if __name__ == "__main__":
    sys.exit(main())
