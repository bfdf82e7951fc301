import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungscreen.encode import NoduleRecord
from lungscreen.errors import IndexOutOfRange, NoduleOutsideExtent
from lungscreen.pyramid import (
    NoduleSet,
    PyramidPooler,
    RegionScheme,
    default_scheme,
    feature_names,
    load_scheme,
    mask_single,
    parse_scheme,
    pool,
    read_feature_csv,
    write_feature_csv,
)
from lungscreen.volume import Extent

EXTENT = Extent((0.0, 0.0, 0.0), (100.0, 100.0, 50.0))
W = 11


def rec(x, y, z, d, conf=1.0, f0=0.5):
    return NoduleRecord((x, y, z), d, conf, (f0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 1.0))


def sub(n):
    return [n.diameter_mm, n.confidence, *n.features]


def pool_oracle(nodules, scheme, extent):
    """Brute force: scan every nodule per region, keep the best by the documented order."""
    out = []
    for box in scheme.regions:
        best = None
        for n in nodules:
            p = [(n.location[a] - extent.lo[a]) / (extent.hi[a] - extent.lo[a]) for a in range(3)]
            if all(box[a] <= p[a] <= box[a + 3] for a in range(3)):
                key = (-n.diameter_mm, -n.confidence, *n.location, *n.features)
                if best is None or key < best[0]:
                    best = (key, n)
        out.extend(sub(best[1]) if best else [0.0] * W)
    return np.array(out)


nodule_strategy = st.builds(
    rec,
    st.floats(0, 100),
    st.floats(0, 100),
    st.floats(0, 50),
    st.sampled_from([3.0, 5.0, 8.0, 12.0]),
    st.sampled_from([0.5, 1.0]),
    st.sampled_from([0.1, 0.9]),
)


class TestScheme:
    def test_default_shape(self):
        s = default_scheme()
        assert len(s) == 17
        assert s.regions[0] == (0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
        assert pool([], s, EXTENT).size == 187

    def test_every_point_covered_twice(self):
        s = default_scheme()
        grid = np.linspace(0, 1, 21)
        for p in itertools.product(grid, repeat=3):
            assert sum(s.contains(r, p) for r in range(len(s))) >= 2

    def test_text_round_trip(self, tmp_path):
        s = default_scheme()
        path = tmp_path / "scheme.txt"
        path.write_text(s.to_text())
        assert load_scheme(path).regions == s.regions

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_scheme("0 0 0 1 1\n")
        with pytest.raises(ValueError):
            parse_scheme("0 0 0 1 1 0\n")
        with pytest.raises(ValueError):
            parse_scheme("# only a comment\n")


class TestPool:
    def test_empty(self):
        assert not pool([], default_scheme(), EXTENT).any()

    def test_centre_nodule(self):
        n = rec(50, 50, 25, 6.0)
        s = default_scheme()
        v = pool([n], s, EXTENT).reshape(17, W)
        centre = (0.5, 0.5, 0.5)
        for r in range(17):
            if s.contains(r, centre):
                assert v[r].tolist() == sub(n)
            else:
                assert not v[r].any()
        # the centre touches all eight octants plus the whole volume and one shifted octant
        assert sum(s.contains(r, centre) for r in range(17)) == 10

    def test_largest_wins(self):
        big, small = rec(10, 10, 10, 10.0), rec(12, 12, 12, 6.0)
        v = pool([small, big], default_scheme(), EXTENT).reshape(17, W)
        assert v[0].tolist() == sub(big)

    def test_tie_breaks(self):
        a = rec(10, 10, 10, 8.0, conf=0.6)
        b = rec(11, 10, 10, 8.0, conf=0.9)
        c = rec(9, 10, 10, 8.0, conf=0.9)
        v = pool([a, b, c], default_scheme(), EXTENT).reshape(17, W)
        assert v[0].tolist() == sub(c)

    def test_outside_extent(self):
        with pytest.raises(NoduleOutsideExtent):
            pool([rec(150, 10, 10, 4.0)], default_scheme(), EXTENT)

    def test_location_option(self):
        v = pool([rec(25, 50, 25, 4.0)], default_scheme(), EXTENT, include_location=True)
        assert v.size == 17 * 14
        assert v[11:14].tolist() == [0.25, 0.5, 0.5]
        assert len(feature_names(default_scheme(), include_location=True)) == v.size

    @settings(max_examples=150, deadline=None)
    @given(st.lists(nodule_strategy, max_size=8), st.randoms(use_true_random=False))
    def test_oracle_and_permutation(self, nodules, rnd):
        s = default_scheme()
        v = pool(nodules, s, EXTENT)
        np.testing.assert_array_equal(v, pool_oracle(nodules, s, EXTENT))
        shuffled = list(nodules)
        rnd.shuffle(shuffled)
        np.testing.assert_array_equal(pool(shuffled, s, EXTENT), v)
        assert v.size == 187

    @settings(max_examples=100, deadline=None)
    @given(st.lists(nodule_strategy, max_size=6), nodule_strategy)
    def test_dominance(self, nodules, extra):
        s = default_scheme()
        before = pool(nodules, s, EXTENT).reshape(17, W)
        after = pool([*nodules, extra], s, EXTENT).reshape(17, W)
        p = EXTENT.normalize(extra.location)
        for r in range(17):
            if not np.array_equal(before[r], after[r]):
                assert s.contains(r, p)
                assert after[r].tolist() == sub(extra)


class TestMask:
    def test_keep_one(self):
        ns = [rec(10, 10, 10, 3.0), rec(80, 80, 40, 5.0), rec(50, 20, 5, 4.0)]
        assert mask_single(ns, 1) == [ns[1]]
        assert mask_single(ns[:1], 0) == ns[:1]

    @pytest.mark.parametrize("index", [-1, 3])
    def test_out_of_range(self, index):
        with pytest.raises(IndexOutOfRange):
            mask_single([rec(1, 1, 1, 1.0)] * 3, index)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(nodule_strategy, min_size=1, max_size=6), st.data())
    def test_masked_vector_only_in_containing_regions(self, nodules, data):
        i = data.draw(st.integers(0, len(nodules) - 1))
        s = default_scheme()
        v = pool(mask_single(nodules, i), s, EXTENT).reshape(17, W)
        p = EXTENT.normalize(nodules[i].location)
        for r in range(17):
            if s.contains(r, p):
                assert v[r].tolist() == sub(nodules[i])
            else:
                assert not v[r].any()


class TestPooler:
    def test_transform(self):
        sets = [NoduleSet([rec(10, 10, 10, 4.0)], EXTENT), NoduleSet([], EXTENT)]
        X = PyramidPooler().fit(sets).transform(sets)
        assert X.shape == (2, 187)
        assert not X[1].any()
        assert len(PyramidPooler().fit(sets).get_feature_names_out()) == 187

    def test_custom_scheme(self):
        scheme = RegionScheme(((0, 0, 0, 0.5, 1, 1), (0.5, 0, 0, 1, 1, 1)))
        X = PyramidPooler(scheme=scheme).fit_transform([NoduleSet([rec(80, 10, 10, 4.0)], EXTENT)])
        assert X.shape == (1, 22) and not X[0, :11].any() and X[0, 11] == 4.0

    def test_feature_csv_round_trip(self, tmp_path):
        X = np.array([[0.0, 1.5, 2.25], [3.0, 0.1, 1e-17]])
        write_feature_csv(tmp_path / "f.csv", ["a", "b"], X, ["p", "q", "r"])
        ids, Y = read_feature_csv(tmp_path / "f.csv")
        assert ids == ["a", "b"]
        np.testing.assert_array_equal(X, Y)
