"""Train a few models, fit accuracy against head count and draw the result.

A short budget keeps this under a minute; see the README for the figure
sweeps. Run with ``python demos/training_sweep.py out_dir``.
"""
import os
import sys

from aotmem.cli import PlotSpec, emit_plot
from aotmem.trainlab import SweepSpec, TrainConfig, fit_scaling_law, run_sweep


def main(out_dir="demo_out"):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "heads.csv")
    configs = [dict(N=10, S=2, d=4, d_h=4, H=H) for H in (1, 2, 3, 4, 6)]
    spec = SweepSpec("demo", configs, TrainConfig(batches_per_epoch=500, batch_size=256, epochs=2), csv_path)
    recs = run_sweep(spec)
    for r in recs:
        print(f"H={r.H:2d} seed={r.seed} accuracy={r.final_accuracy:.2f}")
    # groups near 100% accuracy say nothing about the slope
    fit = fit_scaling_law(recs, "linear", capacity_units=True, max_fraction=0.9)
    print(f"stored associations ~ {fit.coefficients[0]:.1f} + {fit.coefficients[1]:.2f} H "
          f"(R^2 {fit.r_squared:.2f})")
    svg = emit_plot(PlotSpec(csv_path, "H", fit="linear", bounds=("ours", "previous", "chance"),
                             title="accuracy against heads"))
    with open(os.path.join(out_dir, "heads.svg"), "w") as fh:
        fh.write(svg)
    print("wrote", csv_path, "and heads.svg")


if __name__ == "__main__":
    main(*sys.argv[1:])
