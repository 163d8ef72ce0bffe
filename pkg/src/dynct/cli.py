"""Command line interface: ``dynct simulate | fbp | estimate-flow | correct | experiment | convert``."""
from __future__ import annotations

import logging
from pathlib import Path

import click

from .experiments import ExperimentConfig, ExperimentError, add_gaussian_noise, noise_seed, run_experiment, simulate_inputs
from .flow import estimate_motion
from .grid import FlowField
from .motioncorr import build_moved_matrix
from .projector import fbp_reconstruct
from .rasterio import (
    load_flow,
    load_gr64,
    load_image,
    load_sinogram,
    read_keyvalue,
    save_flow,
    save_gr64,
    save_pgm,
    save_sinogram,
)
from .solvers import SolverConfig, lsqr

log = logging.getLogger("dynct")


def _config(config_file, **overrides) -> ExperimentConfig:
    mapping = read_keyvalue(config_file) if config_file else {}
    for k, v in overrides.items():
        if v is not None:
            mapping[k] = str(v)
    return ExperimentConfig.from_mapping(mapping)


def _append_log(path, line: str) -> None:
    if path:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


# options shared by simulate and experiment; None means "not given"
_CONFIG_OPTIONS = [
    click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="key=value file."),
    click.option("--phantom", help="Built-in name (logo, disk, gaussians) or GR64 path."),
    click.option("--motion", help="shift, rotation, motion3 or a flow stem (STEM.vx.gr64/STEM.vy.gr64)."),
    click.option("--n", type=int),
    click.option("--m", type=int, help="Number of scans."),
    click.option("--angles", "angles_per_scan", type=int, help="Angles per scan."),
    click.option("--degrees", type=float, help="Rotation per scan for rotation/motion3, in degrees."),
    click.option("--sigma", type=float, help="Noise standard deviation."),
    click.option("--seed", type=int),
    click.option("--noise-domain", type=click.Choice(["sinogram", "image"])),
    click.option("--supersample", type=int),
    click.option("--method", type=click.Choice(["resampled", "traced"])),
    click.option("--scheme", type=click.Choice(["length", "joseph"]), help="Simulation projector."),
    click.option("--border", type=int, help="Detector margin beyond the grid, in pixels."),
    click.option("--n-det", type=int, help="Detector count (default from n)."),
    click.option("--arc-length/--path-length", "arc_length", default=None, help="Moved-path weight convention."),
    click.option("--lsqr-iter", "lsqr_max_iter", type=int),
    click.option("--flow-iter", "flow_max_iter", type=int),
]


def config_options(fn):
    for opt in reversed(_CONFIG_OPTIONS):
        fn = opt(fn)
    return fn


@click.group()
@click.option("--threads", type=int, default=None, help="Cap on worker threads.")
@click.option("-v", "--verbose", count=True)
def main(threads, verbose):
    """Motion estimation and motion-corrected reconstruction for consecutive CT scans."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if threads:
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


@main.command()
@config_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def simulate(config_file, out_dir, **kw):
    """Simulate the sinograms of m consecutive scans."""
    cfg = _config(config_file, **kw)
    data = simulate_inputs(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(data.sinograms):
        if cfg.sigma > 0:
            s = add_gaussian_noise(s, cfg.sigma, noise_seed(cfg.seed, k))
        save_sinogram(out / f"scan_{k:02d}.gr64", s)
    save_gr64(out / "truth.gr64", data.truth)
    save_flow(out / "flow_exact", data.flow)
    click.echo(f"wrote {len(data.sinograms)} sinograms to {out}")


@main.command()
@click.argument("sinograms", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", type=int, required=True, help="Output grid size.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--pgm/--no-pgm", default=False, help="Also write PGM previews.")
def fbp(sinograms, n, out_dir, pgm):
    """Filtered backprojection of each sinogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in sinograms:
        sino = load_sinogram(path)
        img = fbp_reconstruct(sino, n)
        target = out / f"recon_{sino.scan_index:02d}.gr64"
        save_gr64(target, img)
        if pgm:
            save_pgm(target.with_suffix(".pgm"), img)
        click.echo(str(target))


@main.command("estimate-flow")
@click.argument("recons", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--depth", type=int, default=3, show_default=True)
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True)
@click.option("--max-iter", type=int, default=500, show_default=True)
@click.option("--tol", type=float, default=1e-8, show_default=True)
@click.option("--out", "stem", required=True, help="Output stem; writes STEM.vx.gr64 and STEM.vy.gr64.")
@click.option("--log", "log_file", type=click.Path(dir_okay=False), help="Append solver diagnostics here.")
def estimate_flow(recons, depth, lam, max_iter, tol, stem, log_file):
    """Coarse-to-fine flow from consecutive reconstructions (in scan order)."""
    imgs = [load_image(p) for p in recons]
    history = []
    v = estimate_motion(imgs, depth, lam, SolverConfig(max_iter=max_iter, tol=tol), history)
    px, py = save_flow(stem, v)
    for n, res in history:
        _append_log(log_file, f"estimate-flow n={n} {res.summary()}")
    click.echo(f"{px}\n{py}")


@main.command()
@click.argument("sinogram", type=click.Path(exists=True, dir_okay=False))
@click.option("--flow", "flow_stem", default=None, help="Flow stem; omit for no correction.")
@click.option("--n", type=int, required=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--arc-length/--path-length", default=False, show_default=True, help="Moved-path weight convention.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--log", "log_file", type=click.Path(dir_okay=False))
def correct(sinogram, flow_stem, n, max_iter, tol, arc_length, out_path, log_file):
    """Motion-corrected reconstruction of one scan at its mid-time."""
    sino = load_sinogram(sinogram)
    flow = load_flow(flow_stem) if flow_stem else FlowField.zeros(n)
    A = build_moved_matrix(sino.protocol, flow, n, arc_length=arc_length)
    res = lsqr(A, sino.local_values().ravel(), SolverConfig(max_iter=max_iter, tol=tol))
    save_gr64(out_path, res.x.reshape(n, n))
    _append_log(log_file, f"correct {sinogram} {res.summary()}")
    click.echo(out_path)


@main.command()
@config_options
@click.option("--depth", type=int)
@click.option("--lambda", "lam", type=float)
@click.option("--beta", type=float)
@click.option("--out", "output_dir", type=click.Path(file_okay=False), required=True)
def experiment(config_file, **kw):
    """Run the full pipeline and write metrics, rasters and a MANIFEST."""
    cfg = _config(config_file, **kw)
    try:
        report = run_experiment(cfg)
    except ExperimentError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(report.csv(), nl=False)


@main.command()
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
def convert(src, dst):
    """Convert a GR64 raster to an 8-bit PGM preview."""
    if not dst.endswith(".pgm"):
        raise click.BadParameter("destination must be a .pgm file", param_hint="DST")
    save_pgm(dst, load_gr64(src))


if __name__ == "__main__":
    main()
