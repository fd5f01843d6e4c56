import numpy as np
import pytest

from tomobench.dataio import Mode, Split, build_manifest
from tomobench.errors import ParamsError, ParamsVersionError
from tomobench.geometry import (
    Full,
    LimitedWedge,
    SparseStride,
    canonical_2detect_geometry,
    selection_indices,
)
from tomobench.registry import ReconstructorDescriptor, reconstruct
from tomobench.solvers import FbpFilter, SolverConfig
from tomobench.tasks import (
    TASK_NAMES,
    ExperimentParams,
    build_task,
    default_params,
    format_params,
    parse_params,
    read_params,
    run_experiment,
    write_params,
)

EXPECTED_TABLE = {
    "FullData": (Mode.MODE2, Full()),
    "LimitedAngle120": (Mode.MODE2, LimitedWedge(1200)),
    "LimitedAngle90": (Mode.MODE2, LimitedWedge(900)),
    "LimitedAngle60": (Mode.MODE2, LimitedWedge(600)),
    "SparseAngle360": (Mode.MODE2, SparseStride(360)),
    "SparseAngle120": (Mode.MODE2, SparseStride(120)),
    "SparseAngle60": (Mode.MODE2, SparseStride(60)),
    "LowDose": (Mode.MODE1, Full()),
    "BeamHardening": (Mode.MODE3, Full()),
}


def test_task_table_is_exactly_the_nine_tasks():
    assert set(TASK_NAMES) == set(EXPECTED_TABLE)
    assert len(TASK_NAMES) == 9
    for name, (mode, sel) in EXPECTED_TABLE.items():
        spec = build_task(name)
        assert spec.source_mode is mode
        assert spec.selection == sel
        assert spec.target == "mode2_reference"
    with pytest.raises(KeyError):
        build_task("SparseAngle720")


def test_selections_stay_inside_their_rows():
    g = canonical_2detect_geometry()
    for name in TASK_NAMES:
        spec = build_task(name)
        idx = selection_indices(g, spec.selection)
        assert idx.min() >= 0 and idx.max() < 3600
        if isinstance(spec.selection, LimitedWedge):
            assert idx.max() == spec.selection.first_k_rows - 1
        if isinstance(spec.selection, SparseStride):
            assert len(idx) == spec.selection.n_kept


def test_params_round_trip_is_lossless(tmp_path):
    p = default_params("SparseAngle60", method="chp_tv")
    p.tv_weight = 0.0125
    p.seed = 9
    p.learned = {"checkpoint": "models/x.pt", "epochs": "100"}
    path = tmp_path / "exp.txt"
    write_params(path, p)
    q = read_params(path)
    assert q == p
    # angles survive bit-exactly through the compact uniform encoding
    assert np.array_equal(q.geometry.angles, p.geometry.angles)


def test_params_version_mismatch(tmp_path):
    p = default_params("FullData")
    text = format_params(p).replace("tomobench-params 1", "tomobench-params 2", 1)
    path = tmp_path / "v2.txt"
    path.write_text(text)
    with pytest.raises(ParamsVersionError) as err:
        read_params(path)
    assert "2" in str(err.value) and "1" in str(err.value)


def test_params_parse_errors():
    with pytest.raises(ParamsError):
        parse_params("")
    with pytest.raises(ParamsError):
        parse_params("not-a-params-file 1\n")
    p = default_params("FullData")
    broken = format_params(p).replace("max_iters = 100", "max_iters")
    with pytest.raises(ParamsError):
        parse_params(broken)


def test_hand_edited_weight_is_honored(tmp_path):
    p = default_params("SparseAngle60", method="chp_tv")
    path = tmp_path / "exp.txt"
    write_params(path, p)
    text = path.read_text().replace("tv_weight = 0.0", "tv_weight = 0.75")
    path.write_text(text)
    assert read_params(path).tv_weight == 0.75


def _mini_params(mini_geometry, mini_grid, method="fbp", iters=12):
    p = default_params("FullData", method=method)
    p.geometry = mini_geometry
    p.grid = mini_grid
    p.solver = SolverConfig(max_iters=iters, filter=FbpFilter.RAM_LAK)
    return p


def _recon(method):
    def call(y, grid):
        return reconstruct(
            ReconstructorDescriptor(method, config={"max_iters": 12}), y, grid
        )

    return call


def test_run_experiment_scores_every_slice(mini_dataset, mini_geometry, mini_grid):
    man = build_manifest(mini_dataset)
    p = _mini_params(mini_geometry, mini_grid)
    result = run_experiment(p, man, Split.TEST, _recon("fbp"))
    assert len(result.results) == 10
    assert result.failures == []
    ids = [sid for sid, _, _ in result.results]
    assert ids == sorted(ids)
    mean = np.mean([r.psnr for _, _, r in result.results])
    assert result.summary.psnr_mean == pytest.approx(mean)
    assert result.summary.n == 10


def test_run_experiment_deterministic(mini_dataset, mini_geometry, mini_grid):
    man = build_manifest(mini_dataset)
    p = _mini_params(mini_geometry, mini_grid)
    a = run_experiment(p, man, Split.TEST, _recon("fbp"))
    b = run_experiment(p, man, Split.TEST, _recon("fbp"))
    for (_, ia, ra), (_, ib, rb) in zip(a.results, b.results):
        assert np.array_equal(ia.values, ib.values)
        assert ra == rb


def test_run_experiment_parallel_matches_serial(mini_dataset, mini_geometry, mini_grid):
    man = build_manifest(mini_dataset)
    p = _mini_params(mini_geometry, mini_grid)
    serial = run_experiment(p, man, Split.TEST, _recon("fbp"), jobs=1)
    parallel = run_experiment(p, man, Split.TEST, _recon("fbp"), jobs=4)
    for (_, ia, ra), (_, ib, rb) in zip(serial.results, parallel.results):
        assert np.array_equal(ia.values, ib.values)
        assert ra == rb


def test_run_experiment_empty_split(mini_dataset, mini_geometry, mini_grid):
    man = build_manifest(mini_dataset)
    p = _mini_params(mini_geometry, mini_grid)
    with pytest.raises(ValueError, match="empty"):
        run_experiment(p, man, Split.TRAIN, _recon("fbp"))


def test_run_experiment_survives_slice_failure(
    tmp_path, mini_dataset, mini_geometry, mini_grid
):
    import shutil

    root = tmp_path / "broken"
    shutil.copytree(mini_dataset, root)
    bad = root / "slice04485" / "mode2" / "counts.raw"
    bad.write_bytes(bad.read_bytes()[:40])
    man = build_manifest(root)
    p = _mini_params(mini_geometry, mini_grid)
    result = run_experiment(p, man, Split.TEST, _recon("fbp"))
    assert len(result.results) == 9
    assert len(result.failures) == 1
    assert result.failures[0].slice_id == 4485
    assert "CorruptFileError" in result.failures[0].error
