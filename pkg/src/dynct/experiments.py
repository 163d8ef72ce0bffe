"""End-to-end experiments: simulate, reconstruct, estimate motion, correct.

One call of :func:`run_experiment` covers one motion and one noise level.
Flow estimates are scored by RMSE on the active set; reconstructions of
the first scan by their L2 distance to the object at mid-scan.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .flow import estimate_motion
from .geometry import ScanProtocol, default_n_det
from .grid import FlowField, ImageGrid, center_mesh
from .metrics import active_set, l2_error, metrics_csv, rmse_active
from .motioncorr import build_moved_matrix
from .phantoms import BUILTIN, builtin_phantom
from .projector import (
    METHODS,
    SCHEMES,
    Sinogram,
    fbp_reconstruct,
    object_at,
    simulate_dynamic_sinogram,
    simulate_frozen_sinogram,
)
from .rasterio import load_flow, load_image, save_flow, save_gr64, save_pgm
from .solvers import SolverConfig, lsqr

log = logging.getLogger(__name__)

MOTIONS = ("shift", "rotation", "motion3")
NOISE_DOMAINS = ("sinogram", "image")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: str = "logo"  # built-in name or GR64 path
    motion: str = "rotation"  # shift | rotation | motion3 | flow stem (custom file)
    n: int = 256
    m: int = 10
    angles_per_scan: int = 180
    depth: int = 3
    depths: tuple = (0, 3)  # estimates scored in the RMSE table
    lam: float = 1.0
    beta: float = 0.15
    sigma: float = 0.0
    seed: int | None = None
    noise_domain: str = "sinogram"
    degrees: float = 3.0
    n_det: int | None = None
    border: int = 12
    method: str = "resampled"  # or "traced"
    scheme: str = "length"  # projector of the resampled method
    supersample: int = 2
    arc_length: bool = True  # moved-path weights measured along the detector line
    flow_max_iter: int = 500
    flow_tol: float = 1e-8
    lsqr_max_iter: int = 15  # early stopping; see README
    lsqr_tol: float = 1e-6
    output_dir: str | None = None
    save_rasters: bool = True

    def __post_init__(self):
        for name in ("n", "m", "angles_per_scan", "flow_max_iter", "lsqr_max_iter", "supersample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.m < 3:
            raise ValueError("m must be >= 3 for motion estimation")
        if self.depth < 0 or any(d < 0 for d in self.depths):
            raise ValueError("depths must be >= 0")
        for name in ("lam", "beta", "flow_tol", "lsqr_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.sigma > 0 and self.seed is None:
            raise ValueError("a seed is required when sigma > 0")
        if self.noise_domain not in NOISE_DOMAINS:
            raise ValueError(f"noise_domain must be one of {NOISE_DOMAINS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.n_det is not None and self.n_det < 1:
            raise ValueError("n_det must be positive")
        if self.border < 0:
            raise ValueError("border must be >= 0")

    @property
    def all_depths(self) -> tuple:
        return tuple(sorted(set(self.depths) | {self.depth}))

    def protocol(self) -> ScanProtocol:
        return ScanProtocol(
            m=self.m,
            angles_per_scan=self.angles_per_scan,
            n_det=self.n_det or default_n_det(self.n),
            border=self.border,
        )

    def label(self) -> str:
        kind = self.motion if self.motion in MOTIONS else "custom"
        return f"{kind}_sigma{self.sigma:g}"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        """Build from string values, e.g. a parsed key=value file."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _coerce(types[key], raw)
        return cls(**kw)

    def to_mapping(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[k] = "" if v is None else v
        return out


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    t = str(type_name)
    if raw == "" and "None" in t:
        return None
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    if t == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if t == "tuple":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


# ---------------------------------------------------------------------------
# inputs


def generate_motion_field(kind: str, n: int, degrees: float = 3.0) -> FlowField:
    """Per-scan displacement fields of the three test motions, in pixels."""
    X, Y = center_mesh(n)
    if kind == "shift":
        return FlowField(np.ones((n, n)), np.ones((n, n)))
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    if kind == "rotation":
        # clockwise: R(-th) p - p
        return FlowField(c * X + s * Y - X, -s * X + c * Y - Y)
    if kind == "motion3":
        return FlowField(-((c - 1) * X - s * Y), s * X + (c - 1) * Y)
    raise ValueError(f"unknown motion kind {kind!r}; choose from {MOTIONS}")


def load_phantom(spec: str, n: int) -> ImageGrid:
    if spec in BUILTIN:
        return builtin_phantom(spec, n)
    img = load_image(spec)
    if img.n != n:
        raise ValueError(f"phantom {spec} is {img.n}x{img.n}, expected {n}x{n}")
    return img


def load_motion(spec: str, n: int, degrees: float = 3.0) -> FlowField:
    if spec in MOTIONS:
        return generate_motion_field(spec, n, degrees)
    flow = load_flow(spec)
    if flow.n != n:
        raise ValueError(f"flow {spec} is {flow.n}x{flow.n}, expected {n}x{n}")
    return flow


def gaussian_noise(shape, sigma: float, seed: int) -> np.ndarray:
    """``N(0, sigma^2)`` samples: PCG64 uniforms through Box-Muller."""
    size = int(np.prod(shape))
    half = (size + 1) // 2
    u = np.random.Generator(np.random.PCG64(seed)).random((2, half))
    r = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
    theta = 2.0 * math.pi * u[1]
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
    return sigma * z.reshape(shape)


def add_gaussian_noise(data, sigma: float, seed: int | None = None):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return data
    if seed is None:
        raise ValueError("a seed is required for noise")
    if isinstance(data, Sinogram):
        return Sinogram(data.protocol, data.scan_index, data.values + gaussian_noise(data.values.shape, sigma, seed))
    if isinstance(data, ImageGrid):
        return data.with_values(data.values + gaussian_noise(data.values.shape, sigma, seed))
    arr = np.asarray(data, dtype=np.float64)
    return arr + gaussian_noise(arr.shape, sigma, seed)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rmse: dict  # depth -> RMSE on the active set
    errors: dict  # variant -> L2 error of the first-scan reconstruction
    active_count: int
    timings: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        exp = self.config.label()
        out = [(exp, f"rmse_d{d}", v) for d, v in sorted(self.rmse.items())]
        out += [(exp, f"l2_{k}", v) for k, v in self.errors.items()]
        out.append((exp, "active_pixels", float(self.active_count)))
        return out

    def csv(self) -> str:
        return metrics_csv(self.rows())


def noise_seed(seed: int, k: int) -> int:
    # independent, reproducible stream per noisy array
    return int(np.random.SeedSequence([seed, k]).generate_state(1, dtype=np.uint64)[0])


class _Stages:
    def __init__(self):
        self.timings = {}
        self.current = None

    def run(self, name, fn, *args, **kw):
        self.current = name
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except ExperimentError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise ExperimentError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        log.info("stage %s: %.2fs", name, self.timings[name])
        return out


def _solve(A, b, cfg: ExperimentConfig, n: int) -> ImageGrid:
    res = lsqr(A, b, SolverConfig(max_iter=cfg.lsqr_max_iter, tol=cfg.lsqr_tol))
    return ImageGrid(res.x.reshape(n, n))


@dataclass
class SimulatedData:
    """Noise-free inputs of an experiment; reusable across noise levels."""

    phantom: ImageGrid
    flow: FlowField
    protocol: ScanProtocol
    sinograms: list
    truth: ImageGrid  # object at the middle of the first scan
    stationary: Sinogram  # first scan of the object frozen in that state

    def matches(self, cfg: ExperimentConfig) -> bool:
        return self.protocol == cfg.protocol() and self.phantom.n == cfg.n


def simulate_inputs(cfg: ExperimentConfig, stages: "_Stages | None" = None) -> SimulatedData:
    st = stages or _Stages()
    n = cfg.n
    phantom = st.run("phantom", load_phantom, cfg.phantom, n)
    flow = st.run("motion", load_motion, cfg.motion, n, cfg.degrees)
    protocol = st.run("protocol", cfg.protocol)
    model = dict(scheme=cfg.scheme, supersample=cfg.supersample, method=cfg.method)
    sinos = st.run("simulate", simulate_dynamic_sinogram, phantom, flow, protocol, **model)
    truth = st.run("truth", object_at, phantom, flow, 0.5, cfg.supersample, cfg.method)
    stat = st.run("stationary", simulate_frozen_sinogram, phantom, flow, protocol, 0.5, **model)
    return SimulatedData(phantom, flow, protocol, sinos, truth, stat)


def run_experiment(config: ExperimentConfig, data: SimulatedData | None = None) -> ExperimentReport:
    """Run the full pipeline; writes outputs when ``config.output_dir`` is set.

    ``data`` may carry the noise-free simulation of an earlier run with the
    same phantom, motion and protocol.
    """
    cfg = config
    st = _Stages()
    try:
        if data is None:
            data = simulate_inputs(cfg, st)
        elif not data.matches(cfg):
            raise ExperimentError("simulate", ValueError("precomputed data do not match the config"))
        report = _pipeline(cfg, data, st)
    except ExperimentError as exc:
        if cfg.output_dir:
            _write_manifest(Path(cfg.output_dir), f"failed stage={exc.stage}", cfg)
        raise
    if cfg.output_dir:
        try:
            _write_outputs(report, Path(cfg.output_dir))
        except Exception as exc:  # noqa: BLE001
            _write_manifest(Path(cfg.output_dir), "failed stage=write", cfg)
            raise ExperimentError("write", exc) from exc
    return report


def _pipeline(cfg: ExperimentConfig, data: SimulatedData, st: _Stages) -> ExperimentReport:
    n, protocol, flow, truth = cfg.n, data.protocol, data.flow, data.truth
    clean, stat_clean = data.sinograms, data.stationary

    sinos, stat_sino = clean, stat_clean
    if cfg.sigma > 0 and cfg.noise_domain == "sinogram":

        def noisy():
            s = [add_gaussian_noise(x, cfg.sigma, noise_seed(cfg.seed, k)) for k, x in enumerate(clean)]
            return s, add_gaussian_noise(stat_clean, cfg.sigma, noise_seed(cfg.seed, len(clean)))

        sinos, stat_sino = st.run("noise", noisy)

    recons = st.run("fbp", lambda: [fbp_reconstruct(s, n) for s in sinos])
    if cfg.sigma > 0 and cfg.noise_domain == "image":
        recons = st.run(
            "noise", lambda: [add_gaussian_noise(r, cfg.sigma, noise_seed(cfg.seed, k)) for k, r in enumerate(recons)]
        )
    # the active set comes from noise-free reconstructions so that clean and
    # noisy runs are scored on the same pixels
    clean_recons = recons if cfg.sigma == 0 else st.run("fbp_clean", lambda: [fbp_reconstruct(s, n) for s in clean])
    mask = st.run("active_set", active_set, clean_recons, cfg.beta)

    flow_cfg = SolverConfig(max_iter=cfg.flow_max_iter, tol=cfg.flow_tol)
    estimates, rmse = {}, {}
    for d in cfg.all_depths:
        est = st.run(f"estimate_d{d}", estimate_motion, recons, d, cfg.lam, flow_cfg)
        estimates[d] = est
        if d in cfg.depths or d == cfg.depth:
            rmse[d] = st.run("rmse", rmse_active, flow, est, mask)

    b = sinos[0].local_values().ravel()
    arc = cfg.arc_length
    A_exact = st.run("matrix_exact", build_moved_matrix, protocol, flow, n, arc_length=arc)
    A_est = st.run("matrix_estimated", build_moved_matrix, protocol, estimates[cfg.depth], n, arc_length=arc)
    A_zero = st.run("matrix_zero", build_moved_matrix, protocol, FlowField.zeros(n), n)
    images = {
        "truth": truth,
        "stationary": st.run("lsqr_stationary", _solve, A_zero, stat_sino.local_values().ravel(), cfg, n),
        "corrected_exact": st.run("lsqr_exact", _solve, A_exact, b, cfg, n),
        "corrected_estimated": st.run("lsqr_estimated", _solve, A_est, b, cfg, n),
        "uncorrected": st.run("lsqr_uncorrected", _solve, A_zero, b, cfg, n),
    }
    errors = {k: l2_error(v, truth) for k, v in images.items() if k != "truth"}
    for k, r in enumerate(recons):
        images[f"fbp_{k:02d}"] = r
    images["active_set"] = ImageGrid(mask.mask.astype(np.float64))
    flows = {"flow_exact": flow}
    flows.update({f"flow_estimated_d{d}": v for d, v in estimates.items()})
    return ExperimentReport(cfg, rmse, errors, mask.count, st.timings, images, flows)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, state: str, cfg: ExperimentConfig, files=()) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"state={state}", f"experiment={cfg.label()}"]
    for p in sorted(files):
        lines.append(f"{_sha256(out / p)}  {p}")
    path = out / "MANIFEST"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _write_outputs(report: ExperimentReport, out: Path) -> None:
    from .rasterio import write_keyvalue

    out.mkdir(parents=True, exist_ok=True)
    written = []
    (out / "metrics.csv").write_text(report.csv(), encoding="utf-8", newline="\n")
    written.append("metrics.csv")
    write_keyvalue(out / "config.txt", report.config.to_mapping())
    written.append("config.txt")
    if report.config.save_rasters:
        for name, img in report.images.items():
            save_gr64(out / f"{name}.gr64", img)
            save_pgm(out / f"{name}.pgm", img)
            written += [f"{name}.gr64", f"{name}.pgm"]
        for name, v in report.flows.items():
            px, py = save_flow(out / name, v)
            save_pgm(px.with_suffix(".pgm"), v.vx)
            save_pgm(py.with_suffix(".pgm"), v.vy)
            written += [px.name, py.name, px.with_suffix(".pgm").name, py.with_suffix(".pgm").name]
    report.outputs = written
    _write_manifest(out, "complete", report.config, written)
