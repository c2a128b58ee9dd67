"""Bar chart of per-layer keep ratios from a retention CSV written by `budgetprune report`."""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv")
    ap.add_argument("--out", default="retention.png")
    args = ap.parse_args(argv)

    with open(args.csv, newline="") as f:
        rows = list(csv.DictReader(f))
    layers = [int(r["layer"]) for r in rows]
    kinds = [k for k in rows[0] if k != "layer"]
    width = 0.8 / len(kinds)
    fig, ax = plt.subplots(figsize=(max(4, len(layers) * 0.6), 3))
    for i, kind in enumerate(kinds):
        vals = [float(r[kind]) if r[kind] else 0.0 for r in rows]
        ax.bar([x + (i - (len(kinds) - 1) / 2) * width for x in layers], vals, width, label=kind)
    ax.set_xlabel("layer")
    ax.set_ylabel("keep ratio")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(layers)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)


if __name__ == "__main__":
    main()
