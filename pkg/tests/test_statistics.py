import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbma.data import FociDataset, Focus, Study
from cbma.kernels import KernelSpec, StudyMap, study_map
from cbma.statistics import (
    MaskMismatch,
    StudyWeights,
    ale_statistic,
    compute_statistic,
    mkda_statistic,
    sdm_statistic,
    weights_from_participants,
)

from conftest import box_mask


def const_map(mask, method, values, sid="s"):
    values = np.asarray(values, dtype=float)
    pos = np.flatnonzero(values)
    return StudyMap(mask, sid, method, pos, values[pos])


@pytest.fixture(scope="module")
def tiny():
    return box_mask(n=2, size=1.0, origin=(0.0, 0.0, 0.0))


class TestWeights:
    def test_examples(self, table1):
        assert weights_from_participants(table1, 0).values == (1.0,) * 6
        w = weights_from_participants(table1, 1)
        assert w.values[:4] == (23.0, 23.0, 8.0, 11.0)
        ds = FociDataset([Study("a", "x", 16)])
        assert weights_from_participants(ds, 0.5).values == (4.0,)

    def test_positive(self):
        with pytest.raises(ValueError):
            StudyWeights((1.0, 0.0))


class TestMKDA:
    def test_all_active(self, tiny):
        maps = [const_map(tiny, "MKDA", [1] * 8, f"s{i}") for i in range(3)]
        assert np.all(mkda_statistic(maps, StudyWeights((1, 5, 2))).values == 1.0)

    def test_weighted_example(self, tiny):
        maps = [const_map(tiny, "MKDA", [1] + [0] * 7, "a"), const_map(tiny, "MKDA", [0] * 8, "b")]
        assert mkda_statistic(maps, StudyWeights((2, 1))).values[0] == pytest.approx(2 / 3, abs=1e-15)

    def test_mask_mismatch(self, tiny):
        other = box_mask(n=2, size=2.0, origin=(0.0, 0.0, 0.0))
        maps = [const_map(tiny, "MKDA", [1] * 8, "a"), const_map(other, "MKDA", [1] * 8, "b")]
        with pytest.raises(MaskMismatch):
            mkda_statistic(maps, StudyWeights((1, 1)))

    def test_weight_count(self, tiny):
        with pytest.raises(ValueError):
            mkda_statistic([const_map(tiny, "MKDA", [1] * 8)], StudyWeights((1, 1)))


class TestALE:
    def test_examples(self, tiny):
        zero = [const_map(tiny, "ALE", [0] * 8, f"s{i}") for i in range(2)]
        assert np.all(ale_statistic(zero).values == 0)
        maps = [const_map(tiny, "ALE", [0.1] * 8, "a"), const_map(tiny, "ALE", [0.2] * 8, "b")]
        assert ale_statistic(maps).values[0] == pytest.approx(0.28, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(0, 0.2), min_size=8, max_size=8), min_size=1, max_size=8), st.randoms())
    def test_union_formula_and_permutation(self, tiny, rows, rnd):
        maps = [const_map(tiny, "ALE", r, f"s{i}") for i, r in enumerate(rows)]
        expect = 1 - np.prod(1 - np.array(rows), axis=0)
        got = ale_statistic(maps).values
        assert np.allclose(got, expect, rtol=1e-12, atol=1e-15)
        rnd.shuffle(maps)
        assert np.allclose(ale_statistic(maps).values, got, rtol=1e-13, atol=1e-16)

    def test_monotone(self, tiny):
        a = const_map(tiny, "ALE", [0.1] * 8, "a")
        lo = ale_statistic([a, const_map(tiny, "ALE", [0.05] * 8, "b")]).values
        hi = ale_statistic([a, const_map(tiny, "ALE", [0.06] * 8, "b")]).values
        assert np.all(hi >= lo)

    def test_many_studies_precision(self, tiny):
        maps = [const_map(tiny, "ALE", [1e-3] * 8, f"s{i}") for i in range(437)]
        assert ale_statistic(maps).values[0] == pytest.approx(-np.expm1(437 * np.log1p(-1e-3)), rel=1e-13)


class TestSDM:
    def test_single_study(self, tiny):
        m = const_map(tiny, "SDM", [0.5, -0.25, 1, 0, 0, 0, -1, 0.125])
        assert np.array_equal(sdm_statistic([m], StudyWeights((7,))).values, m.dense())

    def test_contradiction_cancels(self, tiny):
        maps = [const_map(tiny, "SDM", [1] * 8, "a"), const_map(tiny, "SDM", [-1] * 8, "b")]
        assert np.all(sdm_statistic(maps, StudyWeights((1, 1))).values == 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 50), min_size=3, max_size=3), st.floats(0.01, 100))
def test_weight_rescaling_invariance(w, c):
    mask = box_mask(n=2, size=1.0, origin=(0.0, 0.0, 0.0))
    rng = np.random.default_rng(1)
    maps = [const_map(mask, "SDM", rng.uniform(-1, 1, 8), f"s{i}") for i in range(3)]
    a = sdm_statistic(maps, StudyWeights(w)).values
    b = sdm_statistic(maps, StudyWeights([c * x for x in w])).values
    assert np.allclose(a, b, rtol=1e-12, atol=1e-15)
    assert np.argmax(a) == np.argmax(b)


def test_adding_zero_study(mask4):
    studies = [Study(f"s{i}", "x", 10 + i, (Focus(i * 5.0, 0, 0, 1.0), Focus(0, i * 4.0, 10, 1.0)), author=f"s{i}") for i in range(3)]
    empty = Study("e", "x", 20, author="e")
    ds, ds2 = FociDataset(studies), FociDataset(studies + [empty])
    ale = compute_statistic(ds, KernelSpec.ale(4.0), mask4).values
    ale2 = compute_statistic(ds2, KernelSpec.ale(4.0), mask4).values
    assert np.array_equal(ale, ale2)
    for kernel in (KernelSpec.mkda(10.0), KernelSpec.sdm(4.0)):
        a = compute_statistic(ds, kernel, mask4).values
        b = compute_statistic(ds2, kernel, mask4).values
        total = sum(s.n_participants for s in studies)
        assert np.allclose(b, a * total / (total + 20), rtol=1e-12, atol=1e-15)


def test_mass_univariate(mask4):
    """Each voxel's statistic depends only on the study-map values at that voxel."""
    studies = [Study(f"s{i}", "x", 12, (Focus(i * 7.0, -3, 2),)) for i in range(4)]
    maps = [study_map(s, KernelSpec.ale(4.0), mask4) for s in studies]
    stat = ale_statistic(maps).values
    dense = np.array([m.dense() for m in maps])
    assert np.allclose(stat, 1 - np.prod(1 - dense, axis=0), atol=1e-15)


def test_config_key_changes(mask4, table1):
    a = compute_statistic(table1, KernelSpec.mkda(10.0), mask4)
    b = compute_statistic(table1, KernelSpec.mkda(8.0), mask4)
    assert a.config_key != b.config_key
    assert a.config_key == compute_statistic(table1, KernelSpec.mkda(10.0), mask4).config_key
