"""Regenerate the desk-scale result tables.

    python scripts/run_tables.py                      # every spec in scripts/specs
    python scripts/run_tables.py strategies --jobs 2

Each table lands in <out>/<name>/<name>.csv; a short mean-row summary is printed at the end.
"""

import argparse
import logging
import sys
from pathlib import Path

from segpref import cli
from segpref import experiments as ex
from segpref import synthdata as sd

HERE = Path(__file__).resolve().parent
SPECS = HERE / "specs"


def summarize(path: Path) -> None:
    rows = [r for r in ex.read_table(path.read_text()) if r["kind"] == "mean"]
    print(f"\n{path.stem}")
    for r in rows:
        if r["dice"]:
            print(f"  {r['point']:<34} dice {100 * float(r['dice']):6.2f} +- {100 * float(r['dice_std']):5.2f}"
                  f"  iou {100 * float(r['iou']):6.2f}  msdc {100 * float(r['msdc']):6.2f}  n={r['n']}")
        else:
            print(f"  {r['point']:<34} {r['status']}")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("specs", nargs="*", help="spec names (default: all)")
    p.add_argument("--data", type=Path, default=Path("runs/corpus"))
    p.add_argument("--out", type=Path, default=Path("runs/tables"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--preset", default="desk")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    names = args.specs or sorted(f.stem for f in SPECS.glob("*.txt"))
    if not (args.data / sd.MANIFEST_NAME).is_file():
        rc = cli.main(["gen-data", "--out", str(args.data)])
        if rc:
            return rc
    for name in names:
        spec = SPECS / f"{name}.txt"
        out = args.out / name
        rc = cli.main(["ablate", str(spec), "--data", str(args.data), "--out", str(out),
                       "--jobs", str(args.jobs), "--preset", args.preset])
        if rc:
            return rc
    for name in names:
        summarize(args.out / name / f"{name}.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
