import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavesplat.errors import EmptySequence, StructureMismatch
from wavesplat.sparsify import (
    BandStats,
    SparsifyConfig,
    allocate_budget,
    band_stats,
    joint_magnitude,
    load_sparse,
    mad_sigma,
    save_sparse,
    select,
    sparsify_pyramid,
)
from wavesplat.wavelet import BandKey, band_list, dwt3, zero_pyramid


def make_pyramids(rng, dims=(16, 16, 16), levels=2, scale=(1, 1, 1, 1)):
    return [
        dwt3(rng.normal(size=dims) * s, levels, "haar", "periodic")
        for s in scale
    ]


def brute_force_sparsify(pyramids, config):
    """Independent reference: plain-python sort, threshold, then top-K."""
    stats = band_stats(pyramids, config.reference_channel)
    alloc = allocate_budget(stats, config)
    out = {}
    for band in band_list(pyramids[0].levels):
        arrs = [p.bands[band] for p in pyramids]
        entries = []
        for idx in np.ndindex(arrs[0].shape):
            vec = [a[idx] for a in arrs]
            v = float(np.sqrt(sum(x * x for x in vec)))
            entries.append((idx, v, vec))
        vs = [e[1] for e in entries]
        med = float(np.median(vs))
        mad = float(np.median([abs(v - med) for v in vs]))
        t = config.mad_multiplier * mad / 0.6745
        cands = [e for e in entries if e[1] >= t and e[1] > 0.0]
        cands.sort(key=lambda e: (-e[1], e[0]))
        kept = sorted(cands[: alloc[band]], key=lambda e: e[0])
        out[band] = ([e[0] for e in kept], [e[2] for e in kept])
    return out


class TestBandStats:
    def test_zero_band_energy(self):
        pyrs = [zero_pyramid((8, 8, 8), 1, "haar", "symmetric") for _ in range(4)]
        for st_ in band_stats(pyrs):
            assert st_.energy == 0.0

    def test_hand_energy(self):
        pyrs = [zero_pyramid((8, 8, 8), 1, "haar", "symmetric") for _ in range(4)]
        band = BandKey(1, ("H", "L", "L"))
        pyrs[3].bands[band][0, 0, 0] = 1.0
        pyrs[3].bands[band][1, 0, 0] = -2.0
        pyrs[3].bands[band][2, 0, 0] = 2.0
        stats = {s.band: s for s in band_stats(pyrs, ref=3)}
        assert stats[band].energy == 9.0

    def test_count_is_extent_product(self):
        pyrs = [zero_pyramid((8, 8, 4), 1, "haar", "symmetric") for _ in range(4)]
        stats = {s.band: s for s in band_stats(pyrs)}
        assert stats[BandKey(1, ("H", "H", "H"))].count == 4 * 4 * 2

    def test_structure_mismatch(self):
        pyrs = [zero_pyramid((8, 8, 8), 1, "haar", "symmetric") for _ in range(3)]
        pyrs.append(zero_pyramid((8, 8, 8), 1, "haar", "periodic"))
        with pytest.raises(StructureMismatch):
            band_stats(pyrs)

    def test_reference_channel_only(self, rng):
        pyrs = make_pyramids(rng, scale=(10, 10, 10, 1))
        stats_a = band_stats(pyrs, ref=3)
        stats_r = band_stats(pyrs, ref=0)
        assert all(a.energy < r.energy for a, r in zip(stats_a, stats_r))


def two_band_stats(s1, s2):
    # construct stats with energies giving S-values s1, s2 under exponents (1, 0)
    return [
        BandStats(BandKey(1, ("L", "L", "H")), s1, 1),
        BandStats(BandKey(1, ("L", "H", "L")), s2, 1),
    ]


class TestAllocateBudget:
    def test_single_band_gets_budget(self):
        stats = [BandStats(BandKey(1, ("L", "L", "L")), 5.0, 64)]
        cfg = SparsifyConfig(k_total=100)
        assert allocate_budget(stats, cfg) == {stats[0].band: 100}

    def test_proportional_split(self):
        cfg = SparsifyConfig(k_total=100, energy_exp=1.0, count_exp=0.0)
        alloc = allocate_budget(two_band_stats(1.0, 3.0), cfg)
        assert list(alloc.values()) == [25, 75]

    def test_trim_pass_binds_budget(self):
        cfg = SparsifyConfig(k_total=4, energy_exp=1.0, count_exp=0.0)
        stats = two_band_stats(1.0, 3.0)
        alloc = allocate_budget(stats, cfg)
        # naive floors are 10 each; ascending-S trim empties the small band
        assert alloc[stats[0].band] == 0
        assert alloc[stats[1].band] == 4
        assert sum(alloc.values()) == 4

    def test_all_zero_energy_uniform_fallback(self):
        stats = [BandStats(b, 0.0, 8) for b in band_list(1)]
        cfg = SparsifyConfig(k_total=19)
        alloc = allocate_budget(stats, cfg)
        assert sum(alloc.values()) == 19
        assert set(alloc.values()) <= {2, 3}

    def test_floor_applies_when_budget_allows(self):
        # many equal bands leave enough rounding slack that a negligible-S
        # band keeps its floor without the trim pass firing
        cfg = SparsifyConfig(k_total=2119, energy_exp=1.0, count_exp=0.0)
        bands = band_list(3)
        stats = [BandStats(b, 1.0, 1) for b in bands[:-1]]
        stats.append(BandStats(bands[-1], 1e-6, 1))
        alloc = allocate_budget(stats, cfg)
        assert alloc[bands[-1]] == 10  # floored, budget not binding
        assert sum(alloc.values()) <= cfg.k_total


class TestJointMagnitude:
    def test_hand_values(self):
        assert joint_magnitude((3, 4, 0, 0)) == 5.0
        assert joint_magnitude((0, 0, 0, 0)) == 0.0
        assert joint_magnitude((-1, 1, -1, 1)) == 2.0

    @given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
    def test_nonnegative_and_permutation_invariant(self, vals):
        m = joint_magnitude(vals)
        assert m >= 0.0
        assert joint_magnitude(vals[::-1]) == pytest.approx(m, rel=1e-12, abs=1e-12)


class TestMadSigma:
    def test_hand_case_with_outlier(self):
        assert mad_sigma([1, 2, 3, 4, 100]) == pytest.approx(1.0 / 0.6745)

    def test_constant_sequence(self):
        assert mad_sigma([7.0] * 10) == 0.0

    def test_even_length_mean_of_middle_two(self):
        # median 2.5, deviations {1.5, 0.5, 0.5, 1.5}, MAD = 1.0
        assert mad_sigma([1.0, 2.0, 3.0, 4.0]) == pytest.approx(1.0 / 0.6745)

    def test_normal_consistency_monte_carlo(self):
        v = np.random.default_rng(99).normal(size=100_000)
        assert 0.97 <= mad_sigma(v) <= 1.03

    def test_empty(self):
        with pytest.raises(EmptySequence):
            mad_sigma([])


class TestSelect:
    def test_all_below_threshold(self):
        v = np.arange(8.0).reshape(2, 2, 2)
        assert select(v, 100.0, 5).shape == (0, 3)

    def test_top_k_with_threshold(self):
        v = np.array([5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25, 0.125]).reshape(2, 2, 2)
        idx = select(v, 2.5, 2)
        assert [tuple(i) for i in idx] == [(0, 0, 0), (0, 0, 1)]

    def test_tie_break_lexicographic(self):
        v = np.zeros((2, 2, 2))
        v[0, 0, 0] = v[0, 1, 0] = v[1, 0, 1] = 3.0
        idx = select(v, 0.0, 2)
        assert [tuple(i) for i in idx] == [(0, 0, 0), (0, 1, 0)]

    def test_permutation_stability(self, rng):
        v = rng.uniform(0, 1, (4, 4, 4))
        base = select(v, 0.3, 10)
        # transposing the array and mapping indices back must agree
        vt = np.transpose(v, (2, 0, 1))
        idx_t = select(vt, 0.3, 10)
        mapped = sorted((int(i1), int(i2), int(i0)) for i0, i1, i2 in idx_t)
        assert mapped == [tuple(i) for i in base]

    def test_exhaustive_sort_oracle(self, rng):
        v = rng.uniform(0, 1, (5, 4, 3))
        t, k = 0.4, 7
        ref = sorted(
            [idx for idx in np.ndindex(v.shape) if v[idx] >= t],
            key=lambda idx: (-v[idx], idx),
        )[:k]
        assert [tuple(i) for i in select(v, t, k)] == sorted(ref)


class TestSparsifyPyramid:
    def test_zero_pyramids_all_empty(self):
        pyrs = [zero_pyramid((16, 16, 16), 2, "haar", "symmetric") for _ in range(4)]
        sparse = sparsify_pyramid(pyrs, SparsifyConfig(k_total=100))
        assert all(len(sb.indices) == 0 for sb in sparse.values())

    def test_budget_respected(self, rng):
        pyrs = make_pyramids(rng)
        cfg = SparsifyConfig(k_total=50)
        sparse = sparsify_pyramid(pyrs, cfg)
        stats = band_stats(pyrs, cfg.reference_channel)
        alloc = allocate_budget(stats, cfg)
        total = 0
        for band, sb in sparse.items():
            assert len(sb.indices) <= alloc[band]
            total += len(sb.indices)
        assert total <= cfg.k_total

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        pyrs = make_pyramids(rng)
        cfg = SparsifyConfig(k_total=120)
        sparse = sparsify_pyramid(pyrs, cfg)
        ref = brute_force_sparsify(pyrs, cfg)
        for band in band_list(2):
            ref_idx, ref_vals = ref[band]
            assert [tuple(i) for i in sparse[band].indices] == ref_idx
            assert np.allclose(sparse[band].values, np.array(ref_vals).reshape(-1, 4))

    def test_channel_coherence_and_signed_values(self, rng):
        pyrs = make_pyramids(rng)
        sparse = sparsify_pyramid(pyrs, SparsifyConfig(k_total=80))
        for band, sb in sparse.items():
            for idx, vals in zip(sb.indices, sb.values):
                stored = [p.bands[band][tuple(idx)] for p in pyrs]
                assert np.allclose(vals, stored)  # all four channels, signed

    def test_monotone_in_budget(self, rng):
        pyrs = make_pyramids(rng)
        kept = {}
        for k_total in (40, 80, 160, 320):
            sparse = sparsify_pyramid(pyrs, SparsifyConfig(k_total=k_total))
            kept[k_total] = {
                (band, tuple(i)) for band, sb in sparse.items() for i in sb.indices
            }
        assert kept[40] <= kept[80] <= kept[160] <= kept[320]

    def test_sorted_unique_indices(self, rng):
        pyrs = make_pyramids(rng)
        sparse = sparsify_pyramid(pyrs, SparsifyConfig(k_total=100))
        for sb in sparse.values():
            tuples = [tuple(i) for i in sb.indices]
            assert tuples == sorted(tuples)
            assert len(set(tuples)) == len(tuples)


def test_sparse_file_roundtrip(tmp_path, rng):
    pyrs = make_pyramids(rng)
    sparse = sparsify_pyramid(pyrs, SparsifyConfig(k_total=60))
    path = tmp_path / "s.wss"
    save_sparse(sparse, pyrs[0], path)
    header, back = load_sparse(path)
    assert tuple(header["dims"]) == (16, 16, 16)
    for band in band_list(2):
        assert np.array_equal(back[band].indices, sparse[band].indices)
        assert np.allclose(back[band].values, sparse[band].values, atol=1e-6)
