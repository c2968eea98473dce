import numpy as np
import pytest
from scipy.stats import norm

from sbnq import analyze
from sbnq.quantcore import DomainError


class TestGaussianCoverage:
    def test_in_range_fraction(self):
        r = analyze.gaussian_coverage(10**6, seed=0)
        want = 1 - 2 * norm.cdf(-4.0)
        assert abs(r.params["in_range_fraction"] - want) <= 0.0002
        assert r.column("count").sum() == 10**6  # nothing beyond +-6 at this size
        assert len(r.rows) == 100 and r.rows[0][0] == -6.0 and r.rows[-1][1] == 6.0

    def test_narrow_gaussian(self):
        assert analyze.gaussian_coverage(10**4, std=0.001).params["in_range_fraction"] == 1.0

    def test_deterministic(self):
        assert analyze.gaussian_coverage(10**4, 3).to_csv() == analyze.gaussian_coverage(10**4, 3).to_csv()

    def test_minimum_samples(self):
        with pytest.raises(ValueError):
            analyze.gaussian_coverage(100)


class TestSbnHistogram:
    def test_mass_in_window(self):
        r = analyze.sbn_histogram(100, 1000, 10**6, seed=0)
        v, c = r.column("value"), r.column("count")
        assert r.params["shift"] == 10
        assert c[(v >= -5) & (v <= 4)].sum() / c.sum() >= 0.999
        # floor of N(0, s) with s = sigma_hat / 1024: P(v = -1) = Phi(0) - Phi(-1/s)
        s = r.params["sigma_hat"] / 1024
        assert c[v == -1].sum() / c.sum() == pytest.approx(norm.cdf(0) - norm.cdf(-1 / s), abs=0.003)

    def test_standard_normal(self):
        r = analyze.sbn_histogram(0, 1, 10**6, seed=1)
        v, c = r.column("value"), r.column("count")
        p = dict(zip(v.tolist(), (c / c.sum()).tolist()))
        # ap2(1) = 0, so values are floor(x - round(mu_hat)) = floor(x)
        assert p[0] == pytest.approx(norm.cdf(1) - 0.5, abs=0.003)
        assert p[-1] == pytest.approx(0.5 - norm.cdf(-1), abs=0.003)
        assert p[0] + p[-1] > 0.68

    def test_constant_input(self):
        with pytest.raises(DomainError):
            analyze.sbn_histogram(5.0, 1e-320, 10**4)

    def test_integer_support_and_determinism(self):
        a = analyze.sbn_histogram(samples=10**5, seed=2)
        assert a.column("value").dtype.kind == "i"
        assert a.to_csv() == analyze.sbn_histogram(samples=10**5, seed=2).to_csv()


class TestShiftVsMulshift:
    def test_powers_of_two_and_midpoints(self):
        r = analyze.shift_vs_mulshift([3.0, 3.5], samples=10**5, seed=0)
        shift_only, mul = r.column("std_shiftonly"), r.column("std_mulshift")
        assert abs(shift_only[0] - 1) <= 0.01 and abs(mul[0] - 1) <= 0.01
        assert abs(shift_only[1] - 2**0.5) <= 0.02 or abs(shift_only[1] - 2**-0.5) <= 0.02
        assert abs(mul[1] - 1) <= 0.01

    def test_empty_grid(self):
        r = analyze.shift_vs_mulshift([], samples=10)
        assert r.rows == [] and "std_shiftonly" in r.columns

    def test_period_one(self):
        # half-integer exponents sit on the ap2 tie and land on either branch
        offsets = [0.0, 0.2, 0.4, 0.6, 0.8]
        r = analyze.shift_vs_mulshift([1 + o for o in offsets] + [2 + o for o in offsets], samples=10**5, seed=1)
        s = r.column("std_shiftonly")
        np.testing.assert_allclose(s[:5], s[5:], atol=0.02)

    def test_default_grid(self):
        g = analyze.default_grid()
        assert g[0] == 0 and g[-1] == 6 and len(g) == 121


class TestReport:
    def test_csv_and_file(self, tmp_path):
        r = analyze.run("fig3", seed=7, samples=1000)
        path = r.write(tmp_path)
        assert path.name == "fig3_seed7.csv"
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# seed=7")
        assert "std_mulshift" in [ln for ln in lines if not ln.startswith("#")][0]

    def test_unknown(self):
        with pytest.raises(KeyError):
            analyze.run("fig4")
