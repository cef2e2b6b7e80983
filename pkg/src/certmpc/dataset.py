"""Grid seeding, OCP labelling with sensitivities, JSON-lines persistence and
covering radius of a sample set."""
from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .errors import DatasetFormatError, DimensionError, GenerationError
from .ocp import OcpSpec, solve_ocp
from .sensitivity import control_jacobian

log = logging.getLogger(__name__)

FORMAT_TAG = "certmpc-dataset"
FORMAT_VERSION = 1
MAX_FAILED_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class GridSpec:
    lower: np.ndarray
    upper: np.ndarray
    counts: tuple[int, ...]

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        counts = tuple(int(c) for c in self.counts)
        if not (lo.shape == hi.shape and len(counts) == lo.size):
            raise DimensionError("grid bounds and counts must have the same length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("grid bounds must be finite with lower < upper")
        if min(counts) < 2:
            raise ValueError("each grid dimension needs at least 2 points")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "counts", counts)

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.counts) - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lower"], d["upper"], tuple(d["counts"]))

    def __eq__(self, other):
        return (isinstance(other, GridSpec) and self.counts == other.counts
                and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    __hash__ = None


@dataclass
class Sample:
    x: np.ndarray
    u: np.ndarray | None
    jac: np.ndarray | None
    status: str            # "ok" | "degenerate" | solver failure status
    kkt: float | None

    @property
    def labelled(self) -> bool:
        return self.u is not None


@dataclass
class Dataset:
    samples: list[Sample]
    n_x: int
    n_u: int
    grid: GridSpec | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if s.x.shape != (self.n_x,) or (s.u is not None and s.u.shape != (self.n_u,)):
                raise DimensionError("sample dimensions do not match dataset header")
            if s.jac is not None and s.jac.shape != (self.n_u, self.n_x):
                raise DimensionError("sample Jacobian has wrong shape")

    def labelled(self) -> list[Sample]:
        return [s for s in self.samples if s.labelled]

    def arrays(self):
        """Labelled samples as ``(X, U, J, has_jac)``; missing Jacobians are zeros."""
        lab = self.labelled()
        X = np.array([s.x for s in lab]).reshape(-1, self.n_x)
        U = np.array([s.u for s in lab]).reshape(-1, self.n_u)
        J = np.zeros((len(lab), self.n_u, self.n_x))
        mask = np.zeros(len(lab), dtype=bool)
        for i, s in enumerate(lab):
            if s.jac is not None:
                J[i] = s.jac
                mask[i] = True
        return X, U, J, mask

    def summary(self) -> dict:
        counts: dict[str, int] = {}
        for s in self.samples:
            counts[s.status] = counts.get(s.status, 0) + 1
        return {"total": len(self.samples), **dict(sorted(counts.items()))}


def seed_grid(grid: GridSpec) -> np.ndarray:
    """Cartesian product of per-axis linspaces, row-major (last axis fastest)."""
    axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(grid.lower, grid.upper, grid.counts)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def uniform_points(lower, upper, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return rng.uniform(lower, upper, size=(n, lower.size))


def label_point(spec: OcpSpec, x, with_sensitivities: bool = True) -> Sample:
    x = np.asarray(x, dtype=float)
    nlp, sol = solve_ocp(spec, x)
    if not sol.converged:
        return Sample(x, None, None, sol.status, _finite_or_none(sol.kkt_residual))
    jac = None
    status = "ok"
    if with_sensitivities:
        sens = control_jacobian(nlp, sol)
        if sens.degenerate:
            status = "degenerate"
        else:
            jac = sens.du0_dx
    return Sample(x, sol.u_opt, jac, status, float(sol.kkt_residual))


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def _label_chunk(args):
    spec, pts, with_sens = args
    return [label_point(spec, x, with_sens) for x in pts]


def generate(points, spec: OcpSpec, with_sensitivities: bool = True,
             grid: GridSpec | None = None, seed: int = 0, workers: int = 1,
             max_failed_fraction: float = MAX_FAILED_FRACTION) -> Dataset:
    """Label every point with an independent cold-started OCP solve."""
    points = np.asarray(points, dtype=float).reshape(-1, spec.n_x)
    if workers > 1 and len(points) > 1:
        chunks = np.array_split(points, min(workers * 4, len(points)))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_label_chunk, [(spec, c, with_sensitivities) for c in chunks])
            samples = [s for part in parts for s in part]
    else:
        samples = [label_point(spec, x, with_sensitivities) for x in points]

    ds = Dataset(samples, spec.n_x, spec.n_u, grid,
                 {"spec_hash": spec.fingerprint(), "toolkit_version": __version__,
                  "seed": int(seed), "with_sensitivities": bool(with_sensitivities)})
    summary = ds.summary()
    failed = sum(1 for s in samples if not s.labelled)
    degenerate = summary.get("degenerate", 0)
    if failed or degenerate:
        log.warning("dataset generation: %d of %d solves failed, %d degenerate sensitivities",
                    failed, len(samples), degenerate)
    if samples and failed / len(samples) > max_failed_fraction:
        raise GenerationError(f"{failed} of {len(samples)} OCP solves failed "
                              f"(limit {max_failed_fraction:.0%}); check domain and OCP settings")
    return ds


def _is_full_grid(points: np.ndarray, grid: GridSpec) -> bool:
    ref = seed_grid(grid)
    if points.shape != ref.shape:
        return False
    scale = 1e-12 * (1.0 + np.abs(ref).max())
    a = points[np.lexsort(points.T[::-1])]
    b = ref[np.lexsort(ref.T[::-1])]
    return bool(np.all(np.abs(a - b) <= scale))


def covering_radius(ds: Dataset | np.ndarray, domain: GridSpec,
                    probe_density: int | None = None, conservative: bool = False) -> float:
    """Largest distance from a domain point to its nearest labelled sample.

    Full grids use the cell half-diagonal; otherwise (or additionally, when
    ``probe_density`` is given) the maximum over a dense probe grid is used.
    ``conservative`` adds the probe cell half-diagonal to the probed value,
    which makes it an upper bound on the true radius.
    """
    pts = np.asarray([s.x for s in ds.labelled()] if isinstance(ds, Dataset) else ds, dtype=float)
    if pts.size == 0:
        raise ValueError("covering radius of an empty dataset is undefined")
    pts = pts.reshape(-1, domain.lower.size)
    values = []
    if _is_full_grid(pts, domain):
        values.append(0.5 * float(np.sqrt(np.sum(domain.spacing**2))))
    if probe_density is not None or not values:
        density = probe_density or 200
        probe = seed_grid(GridSpec(domain.lower, domain.upper, (density,) * domain.lower.size))
        dist, _ = cKDTree(pts).query(probe)
        margin = 0.0
        if conservative:
            cell = (domain.upper - domain.lower) / (density - 1)
            margin = 0.5 * float(np.sqrt(np.sum(cell**2)))
        values.append(float(dist.max()) + margin)
    return max(values)


# --- persistence -----------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save(ds: Dataset, path) -> None:
    header = {"format": FORMAT_TAG, "version": FORMAT_VERSION,
              "n_x": ds.n_x, "n_u": ds.n_u,
              "grid": ds.grid.to_dict() if ds.grid is not None else None,
              "provenance": ds.provenance}
    lines = [_dump(header)]
    for s in ds.samples:
        lines.append(_dump({
            "x": s.x.tolist(),
            "u": s.u.tolist() if s.u is not None else None,
            "jac": s.jac.tolist() if s.jac is not None else None,
            "status": s.status,
            "kkt": s.kkt,
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed header: {exc.msg}", line=1) from None
    if header.get("format") != FORMAT_TAG:
        raise DatasetFormatError("not a certmpc dataset file", line=1)
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')}", line=1)
    n_x, n_u = int(header["n_x"]), int(header["n_u"])
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed row: {exc.msg}", line=lineno) from None
        try:
            x = np.array(row["x"], dtype=float)
            u = None if row["u"] is None else np.array(row["u"], dtype=float)
            jac = None if row["jac"] is None else np.array(row["jac"], dtype=float)
            status, kkt = str(row["status"]), row["kkt"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"bad row contents: {exc}", line=lineno) from None
        if x.shape != (n_x,) or (u is not None and u.shape != (n_u,)) \
                or (jac is not None and jac.shape != (n_u, n_x)):
            raise DimensionError(f"line {lineno}: row dimensions do not match header "
                                 f"(n_x={n_x}, n_u={n_u})")
        samples.append(Sample(x, u, jac, status, None if kkt is None else float(kkt)))
    grid = GridSpec.from_dict(header["grid"]) if header.get("grid") else None
    return Dataset(samples, n_x, n_u, grid, dict(header.get("provenance") or {}))
