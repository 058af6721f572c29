import numpy as np
import pytest

from cbma.inference import ThresholdResult
from cbma.kernels import KernelSpec
from cbma.pipeline import InferenceSpec
from cbma.power import (
    PowerReport,
    detected_centers,
    emit_report,
    power_measures,
    replicate_outcome,
    sweep,
    true_voxels,
)
from cbma.simulation import SimConfig


@pytest.fixture(scope="module")
def cfg(mask4):
    return SimConfig(mask4, 20, 0.5)


def result_with(mask, sig):
    n = mask.n_in_mask
    return ThresholdResult(mask, np.asarray(sig, bool), np.ones(n), np.ones(n), {"procedure": "test"})


def nearest_voxel(mask, xyz, offset=(0, 0, 0)):
    target = np.asarray(xyz) + np.asarray(offset)
    return int(np.argmin(((mask.coords - target) ** 2).sum(axis=1)))


class TestDetection:
    def test_examples(self, cfg):
        mask = cfg.mask
        sig = np.zeros(mask.n_in_mask, bool)
        assert detected_centers(result_with(mask, sig), cfg) == frozenset()
        # 8 mm off center 1 counts, ~12 mm off center 2 does not
        sig[nearest_voxel(mask, cfg.centers[0], (8, 0, 0))] = True
        sig[nearest_voxel(mask, cfg.centers[1], (12, 0, 0))] = True
        assert detected_centers(result_with(mask, sig), cfg) == frozenset({1})

    def test_all_centers(self, cfg):
        mask = cfg.mask
        sig = np.zeros(mask.n_in_mask, bool)
        for c in cfg.centers:
            sig[nearest_voxel(mask, c)] = True
        out = replicate_outcome(result_with(mask, sig), cfg)
        assert out.detected == frozenset(range(1, 9))
        assert out.tpr == pytest.approx(8 / true_voxels(cfg).sum())
        assert out.any_sig


class TestMeasures:
    def test_example(self):
        m = power_measures([frozenset(range(1, 9)), frozenset({2, 5, 7})], [0.5, 0.1])
        assert m["measure1"] == 1.0
        assert m["measure2"] == 0.5
        assert m["measure3"] == 5.5
        assert m["measure4"] == pytest.approx(0.3)
        assert m["measure2_se"] == pytest.approx(np.std([1, 0], ddof=1) / np.sqrt(2))

    def test_none_detected(self):
        m = power_measures([frozenset()] * 3, [0.0] * 3)
        assert all(m[k] == 0 for k in m)

    def test_single_replicate_se(self):
        m = power_measures([frozenset({1})], [0.2])
        assert m["measure3"] == 1 and m["measure3_se"] == 0

    def test_bounds(self):
        rng = np.random.default_rng(0)
        det = [frozenset(np.flatnonzero(rng.random(8) < 0.5) + 1) for _ in range(50)]
        m = power_measures(det, rng.random(50))
        assert 0 <= m["measure2"] <= m["measure1"] <= 1
        assert 0 <= m["measure3"] <= 8


@pytest.fixture(scope="module")
def small_report(mask4):
    spec = InferenceSpec("fdr")
    return sweep([10], [0.0, 1.0], 2, KernelSpec.ale(4.0), spec, mask4, seed=3)


def test_sweep_cells(small_report):
    assert [(c.I, c.p, c.B) for c in small_report.cells] == [(10, 0.0, 2), (10, 1.0, 2)]
    null_cell = small_report.cell(10, 0.0)
    assert null_cell.measure3 <= 1
    assert small_report.cell(10, 1.0).measure3 >= null_cell.measure3


def test_report_round_trips(small_report):
    again = PowerReport.from_csv(small_report.to_csv(), small_report.config)
    assert again == small_report
    assert PowerReport.from_json(small_report.to_json()) == small_report


def test_sweep_job_independent(mask4, small_report):
    other = sweep([10], [0.0, 1.0], 2, KernelSpec.ale(4.0), InferenceSpec("fdr"), mask4, seed=3, n_jobs=2)
    assert other.to_csv() == small_report.to_csv()


def test_emit(tmp_path, small_report):
    files = emit_report(small_report, tmp_path, {"I=10,p=0.0": 1.0})
    names = sorted(p.name for p in files)
    assert "report.csv" in names and "timing.json" in names
    assert sum(n.endswith(".svg") for n in names) == 8
    svg = (tmp_path / "measure1_vs_Ip.svg").read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert "timing" not in (tmp_path / "report.json").read_text()
