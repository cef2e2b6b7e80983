import json

import numpy as np
import pytest

from certmpc.dataset import (Dataset, GridSpec, Sample, covering_radius, generate, label_point,
                             load, save, seed_grid, uniform_points)
from certmpc.errors import DatasetFormatError, DimensionError, GenerationError
from certmpc.ocp import mpc_law, pendulum_spec


def test_seed_grid_order():
    pts = seed_grid(GridSpec([0, 0], [1, 1], (2, 2)))
    assert pts.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]


def test_pendulum_grid_size_and_spacing(grid):
    pts = seed_grid(grid)
    assert pts.shape == (350, 2)
    assert grid.spacing[0] == (grid.upper[0] - grid.lower[0]) / 24
    assert grid.spacing[1] == 2.0 / 13
    assert np.allclose(np.diff(np.unique(pts[:, 1])), grid.spacing[1], rtol=0, atol=1e-15)


@pytest.mark.parametrize("kw", [dict(lower=[0], upper=[1], counts=(1,)),
                                dict(lower=[1], upper=[0], counts=(3,)),
                                dict(lower=[0, 0], upper=[1, np.inf], counts=(3, 3))])
def test_grid_validation(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


def test_covering_radius_unit_square():
    dom = GridSpec([0, 0], [1, 1], (2, 2))
    assert covering_radius(seed_grid(dom), dom) == pytest.approx(0.5 * np.sqrt(2), abs=1e-15)


def test_covering_radius_full_grid_analytic(grid):
    r = covering_radius(seed_grid(grid), grid)
    assert abs(r - 0.5 * np.hypot(*grid.spacing)) <= 1e-12
    probed = covering_radius(seed_grid(grid), grid, probe_density=241)
    assert r == pytest.approx(max(r, probed))
    assert probed <= r + 1e-12


def test_covering_radius_single_center_sample():
    dom = GridSpec([0, 0], [1, 1], (2, 2))
    r = covering_radius(np.array([[0.5, 0.5]]), dom, probe_density=101)
    assert r == pytest.approx(0.5 * np.sqrt(2), abs=1e-12)   # corners are on the probe grid
    assert covering_radius(np.array([[0.5, 0.5]]), dom, probe_density=101,
                           conservative=True) > r


def test_covering_radius_empty():
    with pytest.raises(ValueError):
        covering_radius(np.zeros((0, 2)), GridSpec([0, 0], [1, 1], (2, 2)))


def test_label_origin_and_jacobian():
    spec = pendulum_spec()
    s = label_point(spec, [0.0, 0.0])
    assert s.status == "ok" and abs(s.u[0]) <= 1e-8
    h = 1e-5
    fd = np.array([[(mpc_law(spec, [h, 0.0]) - mpc_law(spec, [-h, 0.0]))[0] / (2 * h),
                    (mpc_law(spec, [0.0, h]) - mpc_law(spec, [0.0, -h]))[0] / (2 * h)]])
    assert np.linalg.norm(s.jac - fd) / max(1, np.linalg.norm(fd)) <= 1e-4


def test_label_without_sensitivities():
    s = label_point(pendulum_spec(), [0.5, 0.2], with_sensitivities=False)
    assert s.labelled and s.jac is None and s.status == "ok"


def test_parallel_equals_serial():
    spec = pendulum_spec()
    pts = uniform_points([-2 * np.pi, -1], [2 * np.pi, 1], 8, seed=5)
    a = generate(pts, spec, workers=1)
    b = generate(pts, spec, workers=2)
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.x, sb.x) and np.array_equal(sa.u, sb.u)
        assert np.array_equal(sa.jac, sb.jac)


def test_failure_gate():
    spec = pendulum_spec()
    pts = np.array([[0.0, 40.0], [0.0, -40.0], [0.1, 0.0]])
    with pytest.raises(GenerationError):
        generate(pts, spec, with_sensitivities=False)
    ds = generate(pts, spec, with_sensitivities=False, max_failed_fraction=1.0)
    assert [s.labelled for s in ds.samples] == [False, False, True]


def test_pendulum_dataset_counts(pendulum_dataset):
    summary = pendulum_dataset.summary()
    assert summary["total"] == 350
    assert len(pendulum_dataset.labelled()) >= 345
    assert pendulum_dataset.provenance["spec_hash"]


def test_labels_reverify(pendulum_dataset, spec):
    lab = pendulum_dataset.labelled()
    for s in lab[::35]:
        u = mpc_law(spec, s.x)
        assert np.array_equal(u, s.u)       # same settings give identical labels
        assert abs(u[0] - s.u[0]) <= 1e-6


def test_round_trip_bytes(tmp_path, pendulum_dataset):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save(pendulum_dataset, p1)
    ds = load(p1)
    save(ds, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert json.loads(p1.read_text().splitlines()[0])["version"] == 1
    for a, b in zip(pendulum_dataset.samples, ds.samples):
        assert np.array_equal(a.x, b.x)
        assert (a.u is None and b.u is None) or np.array_equal(a.u, b.u)


def test_load_dimension_mismatch(tmp_path):
    ds = Dataset([Sample(np.zeros(2), np.zeros(1), None, "ok", 0.0)], 2, 1, provenance={"a": 1})
    p = tmp_path / "d.jsonl"
    save(ds, p)
    lines = p.read_text().splitlines()
    header = json.loads(lines[0])
    header["n_x"] = 3
    p.write_text(json.dumps(header) + "\n" + lines[1] + "\n")
    with pytest.raises(DimensionError):
        load(p)


def test_load_malformed_reports_line(tmp_path):
    ds = Dataset([Sample(np.zeros(2), np.zeros(1), None, "ok", 0.0)] * 2, 2, 1,
                 provenance={"a": 1})
    p = tmp_path / "d.jsonl"
    save(ds, p)
    lines = p.read_text().splitlines()
    lines[2] = lines[2][:-3]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        load(p)
    p.write_text('{"format": "other"}\n')
    with pytest.raises(DatasetFormatError, match="line 1"):
        load(p)


def test_sample_shape_checked():
    with pytest.raises(DimensionError):
        Dataset([Sample(np.zeros(3), np.zeros(1), None, "ok", 0.0)], 2, 1)
