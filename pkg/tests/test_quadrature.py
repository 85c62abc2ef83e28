import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracml.quadrature import (DecayConstants, Scheme, WeightTable, estimate_decay_constants,
                               gl_weights, l1_weights, make_weights, plateau_variation,
                               scaled_sequences, tail_sums, verify_cm_properties)

mp.mp.dps = 40


def mp_gl(alpha, n):
    """(-1)^k binom(alpha, k), k = 0..n."""
    a = mp.mpf(alpha)
    return [(-1) ** k * mp.binomial(a, k) for k in range(n + 1)]


def mp_l1(alpha, n):
    a = mp.mpf(alpha)
    g = mp.gamma(2 - a)
    p = lambda j: mp.mpf(j) ** (1 - a)
    om = [1 / g] + [(p(k + 1) - 2 * p(k) + p(k - 1)) / g for k in range(1, n + 1)]
    de = [mp.mpf(0)] + [(p(k - 1) - p(k)) / g for k in range(1, n + 1)]
    return om, de


class TestGL:
    def test_recurrence_small(self):
        t = gl_weights(0.5, 2)
        assert t.omega.tolist() == [1.0, -0.5, -0.125]
        assert t.delta.tolist() == [0.0, -1.0, -0.5]

    @pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.8, 0.95])
    def test_matches_binomial_oracle(self, alpha):
        n = 400
        t = gl_weights(alpha, n)
        ref = mp_gl(alpha, n)
        rel = max(abs((mp.mpf(t.omega[k]) - ref[k]) / ref[k]) for k in range(n + 1))
        assert rel < 1e-13
        dref = [mp.mpf(0)] + [-mp.fsum(ref[:k]) for k in range(1, n + 1)]
        rel = max(abs((mp.mpf(t.delta[k]) - dref[k]) / dref[k]) for k in range(1, n + 1))
        assert rel < 1e-13

    def test_delta_asymptote_half(self):
        # |delta_n| n^(1/2) -> 1/Gamma(1/2) = 1/sqrt(pi); closed form of the partial sum in mpmath
        n = 10_000
        exact = abs(mp.binomial(mp.mpf(-0.5), n - 1)) * mp.sqrt(n)
        t = gl_weights(0.5, n)
        assert abs(abs(t.delta[n]) * math.sqrt(n) - float(exact)) < 1e-12
        d = estimate_decay_constants(t, (1, n))
        assert d.c3 <= 1 / math.sqrt(math.pi) <= d.c4

    def test_partial_sum_conservation(self):
        t = gl_weights(0.5, 10**6)
        partial = np.cumsum(t.omega)
        assert partial[-1] > 0
        assert partial[-1] < 1e-3
        assert np.all(np.diff(partial) < 0)
        # O(N^-alpha) with constant 1/Gamma(1-alpha)
        assert partial[-1] * 1e3 == pytest.approx(1 / math.sqrt(math.pi), rel=1e-5)

    def test_alpha03_scaled_in_fitted_bracket(self):
        t = gl_weights(0.3, 10**4)
        d = estimate_decay_constants(t, (100, 10**4))
        v = abs(t.omega[10**4]) * (10**4) ** 1.3
        assert d.c3 <= v <= d.c4
        # extended-precision value of the same scaled entry
        exact = abs(mp.binomial(mp.mpf("0.3"), 10**4)) * mp.mpf(10**4) ** mp.mpf("1.3")
        assert v == pytest.approx(float(exact), rel=1e-11)


class TestL1:
    def test_omega0_closed_form(self):
        t = l1_weights(0.5, 1)
        assert t.omega[0] == pytest.approx(2 / math.sqrt(math.pi), rel=1e-15)
        assert t.omega[0] == pytest.approx(1.1283791671, abs=1e-10)
        assert t.delta[1] == pytest.approx(-2 / math.sqrt(math.pi), rel=1e-15)

    def test_omega2_formula(self):
        t = l1_weights(0.5, 3)
        exact = (mp.sqrt(3) - 2 * mp.sqrt(2) + 1) * 2 / mp.sqrt(mp.pi)
        assert t.omega[2] == pytest.approx(float(exact), rel=1e-14)
        assert t.omega[2] == pytest.approx(-0.108749, abs=1e-6)

    @pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8])
    def test_matches_mpmath(self, alpha):
        n = 300
        t = l1_weights(alpha, n)
        om, de = mp_l1(alpha, n)
        rel_o = max(abs((mp.mpf(t.omega[k]) - om[k]) / om[k]) for k in range(n + 1))
        rel_d = max(abs((mp.mpf(t.delta[k]) - de[k]) / de[k]) for k in range(1, n + 1))
        # second differences of k^(1-a) lose a few digits at large k
        assert rel_o < 1e-10
        assert rel_d < 1e-14


class TestValidation:
    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError, match="alpha"):
            gl_weights(alpha, 10)
        with pytest.raises(ValueError, match="alpha"):
            l1_weights(alpha, 10)

    def test_n_max_zero(self):
        with pytest.raises(ValueError, match="n_max"):
            gl_weights(0.5, 0)

    def test_scheme_parse(self):
        assert Scheme.parse("GL") is Scheme.GL
        assert Scheme.parse("grunwald-letnikov") is Scheme.GL
        assert Scheme.parse(Scheme.L1) is Scheme.L1
        with pytest.raises(ValueError):
            Scheme.parse("bdf2")

    def test_table_immutable(self):
        t = gl_weights(0.5, 4)
        with pytest.raises(ValueError):
            t.omega[1] = 0.0


class TestDecayConstants:
    def test_degenerate_range(self):
        t = gl_weights(0.4, 50)
        d = estimate_decay_constants(t, (1, 1))
        seqs = scaled_sequences(t, 1, 1)
        vals = [float(s[0]) for s in seqs.values()]
        assert d.c3 == min(vals) and d.c4 == max(vals)
        d = estimate_decay_constants(t, (7, 7))
        vals = [float(s[0]) for s in scaled_sequences(t, 7, 7).values()]
        assert (d.c3, d.c4) == (min(vals), max(vals))

    def test_l1_containment(self):
        t = l1_weights(0.3, 1000)
        d = estimate_decay_constants(t, (10, 1000))
        assert d.c3 <= abs(t.omega[500]) * 500**1.3 <= d.c4

    def test_empty_and_out_of_range(self):
        t = gl_weights(0.4, 100)
        with pytest.raises(ValueError, match="empty"):
            estimate_decay_constants(t, (10, 5))
        with pytest.raises(ValueError):
            estimate_decay_constants(t, (0, 10))
        with pytest.raises(ValueError):
            estimate_decay_constants(t, (1, 101))

    def test_tail_matches_direct_sum(self):
        # sum_{k>=n}|omega_k| = direct sum to a long cutoff + remainder ~ cutoff^-a / Gamma(1-a)
        alpha, n, cut = 0.5, 50, 2_000_000
        long = gl_weights(alpha, cut)
        direct = -math.fsum(long.omega[n:])
        remainder = cut**-alpha / math.gamma(1 - alpha)
        short = gl_weights(alpha, 100)
        assert tail_sums(short)[n] == pytest.approx(direct + remainder, rel=1e-6)
        assert tail_sums(short)[0] == short.omega[0]

    def test_widened(self):
        d = DecayConstants(1.0, 2.0, (1, 10)).widened(0.1)
        assert (d.c3, d.c4) == (0.9, pytest.approx(2.2))


class TestCertification:
    def test_gl_passes(self):
        rep = verify_cm_properties(gl_weights(0.4, 1000))
        assert rep.passed, rep.failures()
        names = {c.name for c in rep.checks}
        assert {"sign_pattern", "strict_monotonicity", "partial_sums_positive",
                "partial_sums_decreasing", "delta_partial_sum", "omega_delta_difference"} <= names

    def test_l1_passes(self):
        rep = verify_cm_properties(l1_weights(0.8, 1000))
        assert rep.passed, rep.failures()

    def test_injected_positive_omega1(self):
        t = gl_weights(0.4, 100)
        om = t.omega.copy()
        om[1] = 0.1
        bad = WeightTable(0.4, Scheme.GL, om, t.delta.copy())
        rep = verify_cm_properties(bad)
        failed = {c.name for c in rep.failures()}
        assert "sign_pattern" in failed

    def test_injected_monotonicity_defect(self):
        t = gl_weights(0.4, 100)
        om = t.omega.copy()
        om[50], om[51] = om[51], om[50]
        rep = verify_cm_properties(WeightTable(0.4, Scheme.GL, om, t.delta.copy()))
        assert "strict_monotonicity" in {c.name for c in rep.failures()}
        assert "omega_delta_difference" in {c.name for c in rep.failures()}

    @settings(max_examples=25, deadline=None)
    @given(alpha=st.floats(0.02, 0.98), scheme=st.sampled_from(["gl", "l1"]),
           n=st.integers(1, 3000))
    def test_property_all_tables_certify(self, alpha, scheme, n):
        rep = verify_cm_properties(make_weights(scheme, alpha, n))
        assert rep.passed, rep.failures()


class TestPlateau:
    @pytest.mark.parametrize("scheme", ["gl", "l1"])
    @pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
    def test_plateau_onset(self, scheme, alpha):
        var = plateau_variation(make_weights(scheme, alpha, 10**4), 1000, 10**4)
        assert var["omega"] < 0.1 and var["delta"] < 0.1


def test_csv_roundtrip(tmp_path):
    t = l1_weights(0.3, 20)
    path = tmp_path / "w.csv"
    t.to_csv(path)
    text = path.read_bytes()
    assert b"\r" not in text
    lines = text.decode().splitlines()
    assert lines[0] == "n,omega,delta"
    back = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    assert np.array_equal(back[:, 1], t.omega) and np.array_equal(back[:, 2], t.delta)
