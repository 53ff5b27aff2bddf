"""Plot the CDF tables from ``afsel simulate`` output.

Usage: python scripts/plot_cdf.py simulate.json [--metric best_choice_ratio] [--out cdf.png]
Needs matplotlib, which the package itself does not depend on.
"""

import argparse
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("input")
    ap.add_argument("--metric", default="best_choice_ratio")
    ap.add_argument("--out", default="cdf.png")
    args = ap.parse_args()

    with open(args.input) as f:
        cdf = json.load(f)["cdf"]
    fig, axes = plt.subplots(1, len(cdf), figsize=(4 * len(cdf), 3.5), squeeze=False, sharey=True)
    for ax, (category, methods) in zip(axes[0], sorted(cdf.items())):
        for method, metrics in sorted(methods.items()):
            points = metrics[args.metric]
            ax.step([p[0] for p in points], [p[1] for p in points], where="post", label=method)
        ax.set_title(category)
        ax.set_xlabel(args.metric)
    axes[0][0].set_ylabel("CDF")
    axes[0][-1].legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
