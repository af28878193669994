import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aniheat.errors import DegenerateFit, GridMismatch, NetMemberFailure, NotNormalizable
from aniheat.fieldio import read_field, sha256_file
from aniheat.propagator import DeltaDatum, Grid, GridField, Trajectory, gaussian_field, positivity_min, solve_trajectory
from aniheat.spd_linalg import DiffusivityPath, PointMass, integrate, min_eigenvalue
from aniheat.veryweak import (
    FIT_SKIP,
    SPD_MARGIN,
    AsymptoticScale,
    MollifierSpec,
    Net,
    _spd_repaired,
    classify_net,
    consistency_check,
    constant_net,
    default_epsilons,
    default_family,
    fit_growth_slope,
    mollified_coefficient_net,
    mollify_coefficient,
    scaled_net,
    seminorm_table,
    solve_net,
    sup_family,
    uniqueness_probe,
    validate_scale,
    write_net,
)

EPS = default_epsilons()
G1 = Grid(1, 256, 40.0)
JUMP = DiffusivityPath.piecewise([[[1.0]], [[2.0]]], [1.0])


def smooth_path():
    return DiffusivityPath.smooth(
        lambda t: np.array([[1.0 + 0.5 * math.sin(t)]]),
        1,
        antiderivative=lambda t: np.array([[t + 0.5 - 0.5 * math.cos(t)]]),
    )


class TestScale:
    def test_default_passes(self):
        rep = validate_scale(AsymptoticScale(), EPS)
        assert rep.condition1 and rep.condition2 and rep.passed
        assert not rep.failures

    def test_witness_is_below_product(self):
        rep = validate_scale(AsymptoticScale(), EPS)
        for (ell, j), h in rep.witnesses.items():
            # eps^-h / eps^-(ell + j) -> 0 needs h < ell + j
            assert h < ell + j

    @given(
        start=st.floats(1e-2, 0.5),
        decades=st.floats(3.0, 6.0),
        count=st.integers(8, 30),
    )
    def test_default_passes_any_wide_grid(self, start, decades, count):
        eps = default_epsilons(count, start, start * 10.0 ** (-decades))
        assert validate_scale(AsymptoticScale(), eps).passed

    def test_exponents_sorted(self):
        assert AsymptoticScale((2, -1, 0)).exponents == (-1.0, 0.0, 2.0)
        assert AsymptoticScale().tested_order == 6.0

    def test_small_range_passes(self):
        assert validate_scale(AsymptoticScale(tuple(range(-4, 5))), EPS).passed

    @pytest.mark.parametrize("ell", [0.0, -1.0, -3.0])
    def test_single_exponent_fails_condition2(self, ell):
        rep = validate_scale(AsymptoticScale((ell,)), EPS)
        assert rep.condition1
        assert not rep.condition2
        assert ("condition2", "empty witness set") in rep.failures

    def test_single_growing_exponent_is_its_own_witness(self):
        # eps^-1 = o(eps^-2), so a lone positive exponent satisfies condition 2
        assert validate_scale(AsymptoticScale((1.0,)), EPS).passed

    def test_constant_scale_fails_condition1(self):
        sc = AsymptoticScale((-1.0, 0.0, 1.0), lambda ell, eps: np.ones_like(np.asarray(eps, dtype=float)))
        rep = validate_scale(sc, EPS)
        assert not rep.condition1
        assert ("condition1", -1.0, 0.0) in rep.failures

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            validate_scale(AsymptoticScale(), EPS[:5])


class TestNet:
    def test_sorted_decreasing(self):
        net = Net(EPS[::-1], list(range(12)))
        assert np.all(np.diff(net.epsilons) < 0)
        assert net.members[0] == 11

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 2.0])
    def test_eps_range(self, bad):
        with pytest.raises(ValueError):
            Net(np.array([0.5, bad]), [1, 2])

    def test_length_mismatch(self):
        with pytest.raises(GridMismatch):
            Net(EPS, [1.0])

    def test_arithmetic(self):
        a = scaled_net(1.0, EPS, 1.0)
        b = constant_net(2.0, EPS)
        assert np.allclose((a + b).members, EPS + 2.0)
        assert np.allclose((b - a).members, 2.0 - EPS)

    def test_mismatched_grids(self):
        with pytest.raises(GridMismatch):
            constant_net(1.0, EPS) + constant_net(1.0, EPS * 0.5)

    def test_map(self):
        net = constant_net(3.0, EPS).map(lambda e, m: m * e)
        assert np.allclose(net.members, 3.0 * EPS)


class TestSeminormTable:
    def test_scalar(self):
        t = seminorm_table(scaled_net(-2.0, EPS, 1.0))
        assert list(t) == ["abs"]
        assert np.allclose(t["abs"], 2.0 * EPS)

    def test_default_family_labels(self):
        labels = [l for l, _ in default_family(1)]
        assert labels[:3] == ["Linf", "L1", "L2"]
        # |alpha| + |beta| in {1, 2} for one dimension: 5 seminorms
        assert len(labels) == 3 + 5

    def test_trajectory_takes_sup_over_time(self):
        u = gaussian_field(G1, [[1.0]])
        tr = Trajectory([0.0, 1.0], [u, 2.0 * u])
        t = seminorm_table(constant_net(tr, EPS[:8]), sup_family())
        assert np.allclose(t["Linf"], 2.0 * u.sup())


class TestClassify:
    def test_constant_moderate(self):
        c = classify_net(constant_net(gaussian_field(G1, [[1.0]]), EPS))
        assert c.verdict == "moderate"
        assert all(abs(s) < 1e-12 for s in c.slopes.values())

    @pytest.mark.parametrize("rho", [0.0, 0.5, 1.0, 2.0])
    def test_slope_recovery(self, rho):
        h = gaussian_field(G1, [[2.0]])
        c = classify_net(scaled_net(h, EPS, -rho))
        assert c.verdict == "moderate"
        for s in c.slopes.values():
            assert s == pytest.approx(rho, abs=0.05)

    def test_cubic_decay_negligible_short_range(self):
        c = classify_net(scaled_net(1.0, EPS, 3.0), AsymptoticScale((-2.0, -1.0, 0.0, 1.0, 2.0)))
        assert c.verdict == "negligible"
        assert "tested order 2" in c.describe()

    def test_cubic_decay_moderate_full_range(self):
        # eps^3 is not o(eps^6), so the default scale cannot call it negligible
        assert classify_net(scaled_net(1.0, EPS, 3.0)).verdict == "moderate"

    def test_beyond_tested_order(self):
        assert classify_net(scaled_net(1.0, EPS, 7.0)).verdict == "negligible"

    def test_exponential_growth_neither(self):
        net = Net(EPS, [math.exp(0.01 / e) for e in EPS])
        assert classify_net(net).verdict == "neither"

    def test_oscillating_neither(self):
        net = Net(EPS, [e ** -8.0 * (2.0 + math.sin(40 * math.log(e))) for e in EPS])
        assert classify_net(net).verdict == "neither"

    def test_zero_net(self):
        c = classify_net(constant_net(GridField.zeros(G1), EPS), family=sup_family())
        assert c.verdict == "negligible"
        assert c.slopes["Linf"] == -math.inf

    @given(rho=st.floats(0.0, 3.0), k=st.floats(7.5, 10.0), c=st.floats(0.1, 10.0))
    def test_negligible_addition_keeps_verdict(self, rho, k, c):
        base = scaled_net(c, EPS, -rho)
        a = classify_net(base)
        b = classify_net(base + scaled_net(c, EPS, k))
        assert a.verdict == b.verdict
        assert b.slopes["abs"] == pytest.approx(a.slopes["abs"], abs=0.05)

    def test_grid_requirements(self):
        with pytest.raises(ValueError):
            classify_net(constant_net(1.0, EPS[:6]))
        with pytest.raises(ValueError):
            classify_net(constant_net(1.0, default_epsilons(12, 0.1, 0.001)))

    def test_fit_degenerate(self):
        with pytest.raises(DegenerateFit):
            fit_growth_slope(EPS, np.zeros(12))
        with pytest.raises(DegenerateFit):
            fit_growth_slope(EPS, np.r_[1.0, np.zeros(11)])

    def test_fit_exact_power(self):
        s, r = fit_growth_slope(EPS, 3.0 * EPS ** -1.5)
        assert s == pytest.approx(1.5, abs=1e-12)
        assert r < 1e-12

    def test_fit_window_skips_largest(self):
        vals = EPS ** -1.0
        vals[:FIT_SKIP] = 1e6  # pre-asymptotic junk is ignored
        c = classify_net(Net(EPS, list(vals)))
        assert c.slopes["abs"] == pytest.approx(1.0, abs=1e-12)


class TestMollifier:
    @pytest.mark.parametrize("profile", ["gaussian", "bump"])
    def test_unit_mass_and_limits(self, profile):
        m = MollifierSpec(profile)
        x, w = m.nodes()
        assert np.sum(w) == pytest.approx(1.0, abs=1e-12)
        assert np.all(m.density(np.linspace(-5, 5, 101)) >= 0)
        assert m.cdf(-8.0) == pytest.approx(0.0, abs=1e-15)
        assert m.cdf(8.0) == pytest.approx(1.0, abs=1e-12)
        assert m.cdf(0.0) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("profile", ["gaussian", "bump"])
    def test_cdf_integral_derivative(self, profile):
        m = MollifierSpec(profile)
        z = np.linspace(-0.9, 0.9, 7)
        h = 1e-5
        d = (m.cdf_integral(z + h) - m.cdf_integral(z - h)) / (2 * h)
        assert np.allclose(d, m.cdf(z), atol=1e-8)

    def test_bump_support(self):
        m = MollifierSpec("bump")
        assert m.density(1.0) == 0.0 and m.density(-1.5) == 0.0
        assert m.cdf_integral(3.0) == pytest.approx(3.0)

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            MollifierSpec("boxcar")

    def test_not_normalizable(self, monkeypatch):
        monkeypatch.setattr(MollifierSpec, "_gaussian_mass", staticmethod(lambda: 1.001))
        with pytest.raises(NotNormalizable):
            MollifierSpec("gaussian")


class TestMollifyCoefficient:
    def test_constant_unchanged(self):
        p = DiffusivityPath.constant([[2.0, 0.1], [0.1, 1.0]])
        assert mollify_coefficient(p, MollifierSpec(), 0.3) is p

    @pytest.mark.parametrize("profile", ["gaussian", "bump"])
    def test_jump_midpoint(self, profile):
        a = mollify_coefficient(JUMP, MollifierSpec(profile), 0.05)
        assert a.matrix(1.0)[0, 0] == pytest.approx(1.5, abs=1e-12)
        assert a.matrix(2.0)[0, 0] == pytest.approx(2.0, abs=1e-12)

    @pytest.mark.parametrize("eps", [0.1, 0.01, 0.001])
    def test_point_mass_peak(self, eps):
        c = 0.7
        p = DiffusivityPath.piecewise([[[1.0]]], [], [PointMass(0.5, c, [[1.0]])])
        m = MollifierSpec()
        a = mollify_coefficient(p, m, eps)
        ts = 0.5 + eps * np.linspace(-3, 3, 601)
        top = max(a.matrix(t)[0, 0] for t in ts) - 1.0
        assert top == pytest.approx(c * m.peak / eps, rel=1e-12)

    def test_antiderivative_matches_quadrature(self):
        p = DiffusivityPath.piecewise(
            [np.diag([1.0, 2.0]), np.diag([0.5, 3.0])], [0.4], [PointMass(0.8, 0.2, np.eye(2))]
        )
        a = mollify_coefficient(p, MollifierSpec("bump"), 0.05)
        direct = integrate(a.matrix, 0.0, 1.2, (0.35, 0.45, 0.75, 0.85))
        assert np.allclose(a.antiderivative(1.2), direct, rtol=1e-9)

    def test_smooth_error_second_order(self):
        base = smooth_path()
        errs = []
        for eps in (0.04, 0.02, 0.01):
            a = mollify_coefficient(base, MollifierSpec(), eps)
            errs.append(max(abs(a.matrix(t)[0, 0] - base.matrix(t)[0, 0]) for t in np.linspace(0, 3, 31)))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.allclose(rates, 2.0, atol=0.05)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.5])
    def test_eps_range(self, eps):
        with pytest.raises(ValueError):
            mollify_coefficient(JUMP, MollifierSpec(), eps)

    def test_spd_repair(self):
        repairs = []
        m = np.array([[1.0, 0.0], [0.0, -1e-13]])
        fixed = _spd_repaired(m, repairs, 0.3)
        assert min_eigenvalue(fixed) == pytest.approx(SPD_MARGIN, rel=1e-3)
        assert repairs and repairs[0][0] == 0.3

    def test_spd_no_repair_needed(self):
        repairs = []
        m = np.eye(2)
        assert _spd_repaired(m, repairs, 0.0) is m
        assert repairs == []

    def test_net_builder(self):
        net = mollified_coefficient_net(JUMP, MollifierSpec(), EPS[:8])
        assert [p.eps for _, p in net] == list(net.epsilons)


class TestSolveNet:
    u0 = gaussian_field(G1, [[1.0]])
    times = [0.0, 0.5, 1.0, 1.5]

    def test_constant_nets_identical(self):
        coeff = constant_net(smooth_path(), EPS[:8])
        sol = solve_net(coeff, constant_net(self.u0, EPS[:8]), None, self.times)
        first = sol.members[0]
        for _, tr in sol:
            for u, v in zip(tr.states, first.states):
                assert np.array_equal(u.values, v.values)

    def test_mollified_jump_moderate(self):
        coeff = mollified_coefficient_net(JUMP, MollifierSpec(), EPS)
        sol = solve_net(coeff, constant_net(self.u0, EPS), None, self.times)
        c = classify_net(sol, family=sup_family())
        assert c.verdict == "moderate"
        for _, tr in sol:
            assert tr.sup() <= self.u0.sup() * (1 + 1e-12)
            for u in tr.states:
                assert positivity_min(u) >= -1e-12 * u.sup()

    def test_two_profiles_difference_decays(self):
        nets = [
            solve_net(mollified_coefficient_net(JUMP, MollifierSpec(p), EPS), constant_net(self.u0, EPS), None, [0.0, 1.0])
            for p in ("gaussian", "bump")
        ]
        diff = seminorm_table(nets[0] - nets[1], sup_family())["Linf"]
        slope, _ = fit_growth_slope(EPS[FIT_SKIP:], diff[FIT_SKIP:])
        assert slope < -0.9

    def test_member_failure_names_eps(self):
        bad = Net(EPS[:8], [self.u0] * 7 + [DeltaDatum(G1)])
        with pytest.raises(NetMemberFailure) as info:
            solve_net(constant_net(smooth_path(), EPS[:8]), bad, None, self.times)
        assert info.value.eps == pytest.approx(EPS[7])

    def test_threads_deterministic(self):
        coeff = mollified_coefficient_net(JUMP, MollifierSpec(), EPS[:8])
        u0 = constant_net(self.u0, EPS[:8])
        a = solve_net(coeff, u0, None, self.times, threads=1)
        b = solve_net(coeff, u0, None, self.times, threads=4)
        for (_, x), (_, y) in zip(a, b):
            for u, v in zip(x.states, y.states):
                assert np.array_equal(u.values, v.values)

    def test_mismatched_grids(self):
        with pytest.raises(GridMismatch):
            solve_net(constant_net(JUMP, EPS), constant_net(self.u0, EPS[:8]), None, self.times)


class TestConsistency:
    u0 = gaussian_field(G1, [[1.0]])
    times = [0.0, 0.5, 1.0]

    def test_identical_zero(self):
        ref = solve_trajectory(self.u0, self.times, smooth_path())
        rep = consistency_check(constant_net(ref, EPS), ref)
        assert np.all(rep.distances == 0)
        assert rep.passed

    def test_smooth_slope_two(self):
        path = smooth_path()
        ref = solve_trajectory(self.u0, self.times, path)
        sol = solve_net(
            mollified_coefficient_net(path, MollifierSpec(), EPS), constant_net(self.u0, EPS), None, self.times
        )
        rep = consistency_check(sol, ref)
        assert rep.slope == pytest.approx(2.0, abs=0.3)
        assert rep.passed

    def test_jump_converges(self):
        ref = solve_trajectory(self.u0, self.times + [1.5], JUMP)
        sol = solve_net(
            mollified_coefficient_net(JUMP, MollifierSpec("bump"), EPS),
            constant_net(self.u0, EPS),
            None,
            self.times + [1.5],
        )
        rep = consistency_check(sol, ref)
        assert rep.passed and rep.slope > 0.9

    def test_time_grid_mismatch(self):
        ref = solve_trajectory(self.u0, self.times, smooth_path())
        other = solve_trajectory(self.u0, [0.0, 1.0], smooth_path())
        with pytest.raises(GridMismatch):
            consistency_check(constant_net(other, EPS), ref)

    def test_spatial_grid_mismatch(self):
        ref = solve_trajectory(self.u0, self.times, smooth_path())
        u1 = gaussian_field(Grid(1, 128, 40.0), [[1.0]])
        other = solve_trajectory(u1, self.times, smooth_path())
        with pytest.raises(GridMismatch):
            consistency_check(constant_net(other, EPS), ref)


class TestUniqueness:
    times = [0.0, 0.5, 1.0]

    def coeff(self):
        return mollified_coefficient_net(JUMP, MollifierSpec(), EPS)

    def test_zero_data(self):
        c, sol = uniqueness_probe(self.coeff(), self.times, G1)
        assert c.verdict == "negligible"
        assert all(tr.sup() == 0.0 for _, tr in sol)

    def test_negligible_perturbation(self):
        v = gaussian_field(G1, [[1.0]])
        c, _ = uniqueness_probe(self.coeff(), self.times, G1, u0=scaled_net(v, EPS, 8.0))
        assert c.verdict == "negligible"

    def test_moderate_perturbation_is_not_negligible(self):
        v = gaussian_field(G1, [[1.0]])
        c, sol = uniqueness_probe(self.coeff(), self.times, G1, u0=scaled_net(v, EPS, 1.0))
        assert c.verdict != "negligible"
        # mass conservation for nonnegative data
        for e, tr in sol:
            for u in tr.states:
                assert np.sum(u.values) * G1.cell_volume == pytest.approx(e, rel=1e-10)


class TestWriteNet:
    def test_files_and_checksums(self, tmp_path):
        u0 = gaussian_field(G1, [[1.0]])
        sol = solve_net(mollified_coefficient_net(JUMP, MollifierSpec(), EPS), constant_net(u0, EPS), None, [0.0, 1.0])
        c = classify_net(sol, family=sup_family())
        written = write_net(tmp_path, "net", sol, c, sup_family())
        for rel, digest in written.items():
            assert sha256_file(tmp_path / rel) == digest
        man = json.loads((tmp_path / "net/net_manifest.json").read_text())
        assert man["classification"]["verdict"] == "moderate"
        assert len(man["members"]) == 12
        f = man["members"][3]["fields"][1]
        assert np.array_equal(read_field(tmp_path / f["path"]).values, sol.members[3].states[1].values)
        rows = (tmp_path / "net/seminorms.csv").read_text().splitlines()
        assert rows[0] == "eps,Linf" and len(rows) == 13
