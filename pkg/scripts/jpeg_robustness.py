"""Detector AUC under JPEG recompression, driven through the command-line tools.

Materializes a synthetic corpus, trains a bank and detector on half of the
real images, and sweeps recompression quality on the held-out set.

    python3 scripts/jpeg_robustness.py --work results/jpeg --qualities 100,90,80,70,60,50
"""
import argparse
import csv
from pathlib import Path

from fsd import cli


def run(argv):
    code = cli.main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="results/jpeg")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--qualities", default="100,90,80,70,60,50")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--b", type=int, default=7)
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()

    work = Path(args.work)
    run(["synth-sources", "--out-dir", work / "corpus", "--count", args.count, "--size", args.size])
    manifest = work / "corpus" / "manifest.csv"
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    half = args.count // 2

    def index(r):
        return int(r["path"][-8:-4])

    splits = {
        "train": [r for r in rows if r["label"] == "real" and index(r) < half],
        "test": [r for r in rows if not (r["label"] == "real" and index(r) < half)],
    }
    for name, subset in splits.items():
        with open(work / "corpus" / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label"])
            w.writerows((r["path"], r["label"]) for r in subset)

    desc = ["--b", args.b, "--scales", args.scales, "--workers", args.workers]
    run(["train-filters", "--manifest", work / "corpus/train.csv", "--out", work / "bank.json",
         "--k", args.k, "--m", args.m, "--crop", args.size])
    run(["describe", "--manifest", work / "corpus/train.csv", "--bank", work / "bank.json",
         "--out", work / "train.fsdf"] + desc)
    run(["fit-detector", "--features", work / "train.fsdf", "--components", "1", "--out", work / "detector.json"])
    run(["eval-robustness", "--manifest", work / "corpus/test.csv", "--bank", work / "bank.json",
         "--detector", work / "detector.json", "--qualities", args.qualities, "--out", work / "robustness.csv"])


if __name__ == "__main__":
    main()
