"""Run the three test motions with and without noise and print the tables.

    python scripts/reproduce_tables.py --out results/

Writes one output directory per run plus ``tables.csv`` with all metrics.
"""
from __future__ import annotations

import logging
import time
from pathlib import Path

import click

from dynct.experiments import MOTIONS, ExperimentConfig, run_experiment, simulate_inputs
from dynct.metrics import metrics_csv


@click.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--n", type=int, default=256, show_default=True)
@click.option("--sigma", type=float, default=2.0, show_default=True, help="Noise level of the noisy runs.")
@click.option("--seed", type=int, default=2024, show_default=True)
@click.option("--motion", "motions", multiple=True, type=click.Choice(MOTIONS), help="Subset of motions.")
@click.option("--rasters/--no-rasters", default=False, show_default=True)
def main(out_dir, n, sigma, seed, motions, rasters):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("dynct.solvers").setLevel(logging.WARNING)
    out = Path(out_dir)
    rows = []
    for motion in motions or MOTIONS:
        t0 = time.perf_counter()
        base = dict(motion=motion, n=n, save_rasters=rasters)
        clean_cfg = ExperimentConfig(output_dir=str(out / f"{motion}_clean"), **base)
        data = simulate_inputs(clean_cfg)
        reports = [run_experiment(clean_cfg, data)]
        if sigma > 0:
            noisy_cfg = ExperimentConfig(sigma=sigma, seed=seed, output_dir=str(out / f"{motion}_noisy"), **base)
            reports.append(run_experiment(noisy_cfg, data))
        for r in reports:
            rows += r.rows()
        click.echo(f"{motion}: {time.perf_counter() - t0:.0f} s", err=True)
    text = metrics_csv(rows)
    (out / "tables.csv").write_text(text, encoding="utf-8", newline="\n")
    click.echo(_tables(rows))


def _tables(rows) -> str:
    by = {}
    for exp, var, val in rows:
        by.setdefault(exp, {})[var] = val
    lines = ["flow RMSE on the active set", f"{'run':<22}{'d=0':>10}{'d=3':>10}"]
    for exp, v in by.items():
        lines.append(f"{exp:<22}{v.get('rmse_d0', float('nan')):>10.4f}{v.get('rmse_d3', float('nan')):>10.4f}")
    cols = ("l2_stationary", "l2_corrected_exact", "l2_corrected_estimated", "l2_uncorrected")
    lines += ["", "L2 error of the first-scan reconstruction"]
    lines.append(f"{'run':<22}" + "".join(f"{c[3:]:>22}" for c in cols))
    for exp, v in by.items():
        lines.append(f"{exp:<22}" + "".join(f"{v[c]:>22.4f}" for c in cols))
    return "\n".join(lines)


if __name__ == "__main__":
    main()
