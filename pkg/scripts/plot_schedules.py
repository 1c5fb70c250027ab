"""Plot the alpha and learning-rate schedules of every variant, full-scale and toy."""

import argparse
from pathlib import Path

from pvda.config import ScheduleConfig, Variant
from pvda.plots import plot_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/schedules")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for variant in Variant:
        plot_schedule(ScheduleConfig(variant=variant), 450, out / f"full_{variant.value}.png")
        plot_schedule(ScheduleConfig.toy(variant=variant), 45, out / f"toy_{variant.value}.png")
    print(f"wrote {len(Variant) * 2} figures to {out}")


if __name__ == "__main__":
    main()
