"""Tests for SDR metrics and paired statistics."""

import csv
import itertools
import math

import numpy as np
import pytest
import scipy.stats

from stmask.evaluation import (
    PairedStats,
    SdrResult,
    apply_holm,
    compute_sdr,
    holm_correction,
    paired_report,
    sdri,
    wilcoxon_signed_rank,
    write_paired_report_csv,
    write_rows_csv,
)


def oracle_projection_sdr(estimate, reference, filter_len):
    """Independent projection SDR via an explicit shift matrix + lstsq."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    n = reference.size
    total = n + filter_len - 1
    shifts = np.zeros((total, filter_len))
    for i in range(filter_len):
        shifts[i : i + n, i] = reference
    padded = np.zeros(total)
    padded[:n] = estimate
    coeffs, *_ = np.linalg.lstsq(shifts, padded, rcond=None)
    target = shifts @ coeffs
    resid = padded - target
    te = float(target @ target)
    re_ = float(resid @ resid)
    if te <= 0.0:
        return -100.0
    if re_ <= 0.0:
        return 100.0
    return float(np.clip(10.0 * np.log10(te / re_), -100.0, 100.0))


def oracle_wilcoxon_p(diffs):
    """Exact two-sided p by enumerating all sign assignments (midranks)."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    ranks = scipy.stats.rankdata(np.abs(d))
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    w2 = int(np.rint(2.0 * ranks[d > 0].sum()))
    patterns = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    sums = patterns @ doubled
    le = int(np.sum(sums <= w2))
    ge = int(np.sum(sums >= w2))
    return min(1.0, 2.0 * min(le, ge) / float(2**n))


class TestComputeSdr:
    def test_perfect_estimate_is_capped(self):
        rng = np.random.default_rng(0)
        ref = rng.standard_normal(4000)
        result = compute_sdr([ref], [ref], filter_len=16)
        assert isinstance(result, SdrResult)
        assert result.sdr[0] == pytest.approx(100.0)
        assert np.array_equal(result.pairing, [0])

    def test_half_scale_matches_unit_scale(self):
        rng = np.random.default_rng(1)
        ref = rng.standard_normal(4000)
        full = compute_sdr([ref], [ref], filter_len=1).sdr[0]
        half = compute_sdr([0.5 * ref], [ref], filter_len=1).sdr[0]
        assert half == pytest.approx(full)
        assert half == pytest.approx(100.0)

    def test_scale_invariance_of_noisy_estimate(self):
        rng = np.random.default_rng(2)
        ref = rng.standard_normal(6000)
        est = ref + 0.1 * rng.standard_normal(6000)
        one = compute_sdr([est], [ref], filter_len=1).sdr[0]
        scaled = compute_sdr([3.7 * est], [ref], filter_len=1).sdr[0]
        assert scaled == pytest.approx(one, abs=1e-9)

    def test_white_noise_at_minus_20_db(self):
        rng = np.random.default_rng(3)
        ref = rng.standard_normal(32000)
        noise = rng.standard_normal(32000)
        noise *= math.sqrt(0.01 * float(ref @ ref) / float(noise @ noise))
        result = compute_sdr([ref + noise], [ref], filter_len=1)
        assert result.sdr[0] == pytest.approx(20.0, abs=0.1)

    @pytest.mark.parametrize("filter_len", [1, 4, 16])
    def test_matches_shift_matrix_oracle(self, filter_len):
        rng = np.random.default_rng(4 + filter_len)
        ref = rng.standard_normal(400)
        est = 0.8 * ref + 0.3 * rng.standard_normal(400)
        got = compute_sdr([est], [ref], filter_len=filter_len).sdr[0]
        want = oracle_projection_sdr(est, ref, filter_len)
        assert got == pytest.approx(want, abs=1e-6)

    def test_swapped_estimates_are_paired_back(self):
        rng = np.random.default_rng(5)
        refs = rng.standard_normal((2, 5000))
        ests = [refs[1] + 0.01 * rng.standard_normal(5000), refs[0]]
        result = compute_sdr(ests, refs, filter_len=8)
        assert np.array_equal(result.pairing, [1, 0])
        assert np.all(result.sdr > 30.0)

    def test_pairing_maximizes_mean_sdr(self):
        rng = np.random.default_rng(6)
        refs = rng.standard_normal((3, 3000))
        mixing = rng.uniform(0.2, 1.0, size=(3, 3))
        ests = mixing @ refs
        result = compute_sdr(ests, refs, filter_len=4)
        matrix = np.array(
            [
                [
                    compute_sdr([ests[i]], [refs[j]], filter_len=4).sdr[0]
                    for j in range(3)
                ]
                for i in range(3)
            ]
        )
        best = max(
            sum(matrix[p[j], j] for j in range(3))
            for p in itertools.permutations(range(3))
        )
        achieved = sum(matrix[result.pairing[j], j] for j in range(3))
        assert achieved == pytest.approx(best, abs=1e-9)

    def test_rejects_zero_energy_reference(self):
        rng = np.random.default_rng(7)
        est = rng.standard_normal(100)
        with pytest.raises(ValueError, match="zero energy"):
            compute_sdr([est], [np.zeros(100)], filter_len=4)

    def test_rejects_shape_problems(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal(100)
        b = rng.standard_normal(120)
        with pytest.raises(ValueError, match="common length"):
            compute_sdr([a, b], [a, a], filter_len=4)
        with pytest.raises(ValueError, match="does not match"):
            compute_sdr([a], [b], filter_len=4)
        with pytest.raises(ValueError, match="estimates"):
            compute_sdr([a, a], [a[None].repeat(3, 0)][0], filter_len=4)
        with pytest.raises(ValueError, match="filter_len"):
            compute_sdr([a], [a], filter_len=200)
        with pytest.raises(ValueError):
            compute_sdr([a], [a], filter_len=0)


class TestSdri:
    def test_mixture_as_estimate_gives_zero(self):
        rng = np.random.default_rng(10)
        refs = rng.standard_normal((2, 4000))
        mix = refs.sum(axis=0)
        got = sdri([mix, mix], refs, mix, filter_len=8)
        assert np.array_equal(got, np.zeros(2))

    def test_perfect_estimates_reach_cap_minus_input(self):
        rng = np.random.default_rng(11)
        refs = rng.standard_normal((2, 4000))
        mix = refs.sum(axis=0)
        got = sdri(refs, refs, mix, filter_len=8)
        base = [
            compute_sdr([mix], [refs[n]], filter_len=8).sdr[0] for n in range(2)
        ]
        assert got == pytest.approx([100.0 - base[0], 100.0 - base[1]])

    def test_matches_hand_computed_projection_values(self):
        rng = np.random.default_rng(12)
        refs = rng.standard_normal((2, 300))
        mix = refs.sum(axis=0)
        ests = [
            0.9 * refs[0] + 0.1 * rng.standard_normal(300),
            1.1 * refs[1] + 0.2 * rng.standard_normal(300),
        ]
        got = sdri(ests, refs, mix, filter_len=4)
        want = np.array(
            [
                oracle_projection_sdr(ests[n], refs[n], 4)
                - oracle_projection_sdr(mix, refs[n], 4)
                for n in range(2)
            ]
        )
        assert got == pytest.approx(want, abs=1e-6)

    def test_rejects_mismatched_mixture_length(self):
        rng = np.random.default_rng(13)
        refs = rng.standard_normal((2, 400))
        with pytest.raises(ValueError, match="mixture"):
            sdri(refs, refs, rng.standard_normal(300), filter_len=4)


class TestWilcoxon:
    def test_all_positive_small_sample(self):
        result = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0])
        assert result.p_value == 2.0 / 2**5
        assert result.statistic == pytest.approx(15.0)
        assert result.method == "exact"
        assert result.n_effective == 5
        assert result.n_zeros == 0

    def test_symmetric_pair(self):
        result = wilcoxon_signed_rank([-1.0, 1.0])
        assert result.p_value == 1.0

    def test_all_zeros_flagged(self):
        result = wilcoxon_signed_rank([0.0, 0.0, 0.0])
        assert result.p_value == 1.0
        assert result.method == "all_zero"
        assert result.n_zeros == 3
        assert result.n_effective == 0

    def test_zeros_dropped_and_counted(self):
        with_zeros = wilcoxon_signed_rank([0.0, 1.0, -2.0, 0.0, 3.0])
        without = wilcoxon_signed_rank([1.0, -2.0, 3.0])
        assert with_zeros.p_value == without.p_value
        assert with_zeros.n_zeros == 2
        assert with_zeros.n_effective == 3

    def test_exact_branch_matches_enumeration(self):
        rng = np.random.default_rng(20)
        for trial in range(100):
            n = int(rng.integers(1, 13))
            if trial % 2:
                d = rng.integers(-3, 4, size=n).astype(float)  # many ties/zeros
            else:
                d = rng.standard_normal(n)
            if np.all(d == 0):
                d[0] = 1.0
            got = wilcoxon_signed_rank(d)
            assert got.method == "exact"
            assert got.p_value == oracle_wilcoxon_p(d)

    def test_normal_branch_matches_scipy(self):
        rng = np.random.default_rng(21)
        d = np.round(rng.standard_normal(40), 1)
        d = d[d != 0]
        assert d.size > 25
        got = wilcoxon_signed_rank(d)
        assert got.method == "normal"
        ref = scipy.stats.wilcoxon(
            d, zero_method="wilcox", correction=True, alternative="two-sided",
            method="approx",
        )
        assert got.p_value == pytest.approx(ref.pvalue, abs=1e-10)

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError, match="at least one"):
            wilcoxon_signed_rank([])
        with pytest.raises(ValueError, match="finite"):
            wilcoxon_signed_rank([1.0, np.nan])


class TestHolm:
    def test_single_p_unchanged(self):
        assert holm_correction([0.03]) == pytest.approx([0.03])

    def test_two_value_example(self):
        assert holm_correction([0.01, 0.04]) == pytest.approx([0.02, 0.04])
        assert holm_correction([0.04, 0.01]) == pytest.approx([0.04, 0.02])

    def test_all_ones(self):
        assert holm_correction([1.0, 1.0, 1.0]) == pytest.approx([1.0, 1.0, 1.0])

    def test_monotone_and_dominating(self):
        rng = np.random.default_rng(30)
        for _ in range(20):
            p = rng.uniform(size=int(rng.integers(1, 9)))
            adj = holm_correction(p)
            assert np.all(adj >= p - 1e-15)
            assert np.all(adj <= 1.0)
            order = np.argsort(p, kind="stable")
            assert np.all(np.diff(adj[order]) >= -1e-15)

    def test_matches_pairwise_reference(self):
        rng = np.random.default_rng(31)
        p = rng.uniform(size=6)
        order = np.argsort(p, kind="stable")
        want = np.empty(6)
        for rank, idx in enumerate(order):
            candidates = [
                min(1.0, (6 - r) * p[order[r]]) for r in range(rank + 1)
            ]
            want[idx] = max(candidates)
        assert holm_correction(p) == pytest.approx(want, abs=1e-15)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="0, 1"):
            holm_correction([0.5, 1.5])
        assert holm_correction([]).size == 0


class TestPairedReport:
    def test_identical_samples(self):
        a = np.array([3.0, 4.0, 5.0])
        stats = paired_report(a, a, labels=("x", "y"))
        assert stats.delta_mean == 0.0
        assert stats.d_z == 0.0
        assert stats.p_raw == 1.0
        assert stats.degenerate

    def test_constant_difference_sentinel(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        stats = paired_report(a + 1.0, a)
        assert stats.delta_mean == pytest.approx(1.0)
        assert stats.se == 0.0
        assert stats.d_z == math.inf
        assert stats.degenerate
        down = paired_report(a - 1.0, a)
        assert down.d_z == -math.inf

    def test_requires_two_pairs(self):
        with pytest.raises(ValueError, match="two pairs"):
            paired_report([1.0], [2.0])
        with pytest.raises(ValueError, match="equal length"):
            paired_report([1.0, 2.0], [1.0])

    def test_dual_path_statistics_agree(self):
        rng = np.random.default_rng(40)
        a = rng.normal(8.0, 2.0, size=24)
        b = rng.normal(7.0, 2.0, size=24)
        stats = paired_report(a, b, labels=("sys_a", "sys_b"))
        d = a - b
        n = d.size
        mean = float(np.sum(d)) / n
        var = (float(np.sum(d * d)) - n * mean * mean) / (n - 1)
        sd = math.sqrt(var)
        assert stats.delta_mean == pytest.approx(mean, abs=1e-10)
        assert stats.se == pytest.approx(sd / math.sqrt(n), abs=1e-10)
        assert stats.d_z == pytest.approx(mean / sd, abs=1e-10)
        assert stats.mean_a == pytest.approx(float(a.mean()), abs=1e-12)
        assert stats.mean_b == pytest.approx(float(b.mean()), abs=1e-12)
        assert stats.n == 24
        assert not stats.degenerate

    def test_apply_holm_across_conditions(self):
        rng = np.random.default_rng(41)
        reports = []
        for shift in (1.5, 0.2, 0.05):
            a = rng.normal(shift, 1.0, size=16)
            reports.append(paired_report(a, np.zeros(16)))
        adjusted = apply_holm(reports)
        raw = [r.p_raw for r in reports]
        want = holm_correction(raw)
        assert [r.p_holm for r in adjusted] == pytest.approx(list(want))
        assert [r.p_raw for r in adjusted] == pytest.approx(raw)


class TestCsv:
    def test_write_rows_csv_round_trip(self, tmp_path):
        path = tmp_path / "rows.csv"
        rows = [
            {"mixture": "m0", "sdri": 8.25, "system": "a"},
            {"mixture": "m1", "sdri": 7.5, "system": "a"},
        ]
        write_rows_csv(path, rows)
        with open(path, newline="") as fh:
            back = list(csv.DictReader(fh))
        assert back[0]["mixture"] == "m0"
        assert float(back[1]["sdri"]) == pytest.approx(7.5)

    def test_write_paired_report_csv(self, tmp_path):
        rng = np.random.default_rng(50)
        a = rng.normal(9.0, 1.0, size=12)
        b = rng.normal(8.0, 1.0, size=12)
        stats = paired_report(a, b, labels=("nu1", "nuM"))
        path = tmp_path / "report.csv"
        write_paired_report_csv(
            path, [({"M": 3, "N": 2, "rt60": 0.3}, stats)]
        )
        with open(path, newline="") as fh:
            back = list(csv.DictReader(fh))
        row = back[0]
        assert row["M"] == "3"
        assert float(row["mean_nu1"]) == pytest.approx(stats.mean_a)
        assert float(row["delta_mean"]) == pytest.approx(stats.delta_mean)
        assert float(row["p_holm"]) == pytest.approx(stats.p_holm)
        assert "d_z" in row
