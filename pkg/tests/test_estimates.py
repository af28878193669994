import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aniheat.checks import band_limited_field
from aniheat.errors import InadmissibleExponents, InvalidExponent, ZeroAccumulation
from aniheat.estimates import (
    BoundRow,
    DecayData,
    ExponentTriple,
    _singular_integral,
    check_young,
    decay_bound,
    decay_constant,
    energy_trace,
    norm_estimate,
    source_beta_norm,
    write_bound_csv,
    young_bound,
)
from aniheat.kernel import KernelParams, kernel_lp_norm
from aniheat.propagator import Grid, GridField, Trajectory, gaussian_field, lq_norm, solve_trajectory
from aniheat.spd_linalg import DiffusivityPath

G1 = Grid(1, 256, 40.0)
G2 = Grid(2, 128, 30.0)
IDENT1 = DiffusivityPath.constant([[1.0]])
IDENT2 = DiffusivityPath.constant(np.eye(2))


def wavy_path():
    return DiffusivityPath.smooth(lambda t: np.array([[1.0 + 0.5 * math.sin(t), 0.2], [0.2, 0.6]]), 2)


class TestExponentTriple:
    def test_relation(self):
        ExponentTriple(2.0, 2.0, math.inf)
        ExponentTriple(1.0, 3.0, 3.0)
        with pytest.raises(InvalidExponent):
            ExponentTriple(2.0, 2.0, 2.0)

    def test_below_one(self):
        with pytest.raises(InvalidExponent):
            ExponentTriple(0.5, 1.0, 1.0)

    def test_from_qr(self):
        tr = ExponentTriple.from_qr(1.0, math.inf)
        assert tr.p == math.inf
        assert ExponentTriple.from_qr(2.0, 2.0).p == 1.0
        with pytest.raises(InvalidExponent):
            ExponentTriple.from_qr(3.0, 2.0)

    @given(st.integers(0, 2**32 - 1))
    def test_random_admissible(self, seed):
        tr = ExponentTriple.random(np.random.default_rng(seed))
        inv = lambda x: 0.0 if math.isinf(x) else 1.0 / x
        assert abs(inv(tr.p) + inv(tr.q) - inv(tr.r) - 1.0) <= 1e-12
        assert min(tr.p, tr.q, tr.r) >= 1.0


class TestYoung:
    def test_p_one_is_one(self):
        assert young_bound(ExponentTriple(1.0, 2.0, 2.0), (0.0, 1.0), wavy_path()) == 1.0

    def test_collapse_to_norm(self):
        tr = ExponentTriple(2.0, 2.0, math.inf)
        kp = KernelParams.from_path(IDENT1, (0.0, 1.0))
        assert young_bound(tr, (0.0, 1.0), IDENT1) == kernel_lp_norm(2.0, kp)

    def test_p_inf(self):
        tr = ExponentTriple(math.inf, 1.0, math.inf)
        b = young_bound(tr, (0.0, 1.0), IDENT2)
        assert b == pytest.approx(1.0 / math.sqrt((4 * math.pi) ** 2), rel=1e-15)

    def test_zero_field(self):
        row = check_young(GridField.zeros(G2), ExponentTriple(1.5, 1.5, 3.0), (0.0, 1.0), IDENT2)
        assert row.lhs == 0.0 and row.satisfied

    def test_non_expansive(self):
        row = check_young(gaussian_field(G2, np.eye(2)), ExponentTriple(1.0, 2.0, 2.0), (0.0, 1.0), wavy_path())
        assert row.satisfied
        assert row.lhs <= lq_norm(gaussian_field(G2, np.eye(2)), 2.0)

    @given(st.integers(0, 2**32 - 1))
    def test_random_sweep(self, seed):
        rng = np.random.default_rng(seed)
        tr = ExponentTriple.random(rng)
        v = band_limited_field(G2, rng) + gaussian_field(G2, np.eye(2))
        s = rng.uniform(0, 1)
        assert check_young(v, tr, (s, s + rng.uniform(0.05, 1.0)), wavy_path()).satisfied

    def test_bound_row(self):
        row = BoundRow(1.0, 2.0, 2.0 * (1 + 1e-9))
        assert row.satisfied and row.margin > 0
        assert not BoundRow(1.0, 2.0, 1.9).satisfied


class TestEnergy:
    def test_zero_trajectory(self):
        z = GridField.zeros(G1)
        tr = energy_trace(Trajectory([0.0, 1.0], [z, z]), 2.0)
        assert np.all(tr.values == 0.0)

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
    def test_homogeneous_nonincreasing(self, p):
        traj = solve_trajectory(gaussian_field(G2, [[0.5, 0.1], [0.1, 0.3]]), np.linspace(0, 2, 11), wavy_path())
        assert energy_trace(traj, p).is_nonincreasing(1e-10)

    def test_later_start_is_smaller(self):
        u0 = gaussian_field(G1, [[0.3]])
        times = np.linspace(0.1, 1.0, 10)
        early = energy_trace(solve_trajectory(u0, times, IDENT1), 2.0)
        shifted = solve_trajectory(solve_trajectory(u0, [0.2], IDENT1).states[0], times, IDENT1)
        late = energy_trace(shifted, 2.0)
        assert np.all(late.values <= early.values * (1 + 1e-12))

    @pytest.mark.parametrize("p", [1.0, math.inf, 0.5])
    def test_exponent_range(self, p):
        z = GridField.zeros(G1)
        with pytest.raises(InvalidExponent):
            energy_trace(Trajectory([0.0], [z]), p)

    def test_uniqueness_via_energy(self):
        # two routes to the same solution differ by a zero-energy field
        u0 = gaussian_field(G2, np.eye(2))
        a = solve_trajectory(u0, [0.3, 0.6, 0.9], wavy_path())
        b = Trajectory([0.3, 0.6, 0.9], [solve_trajectory(u0, [t], wavy_path()).states[0] for t in (0.3, 0.6, 0.9)])
        for p in (1.5, 2.0, 3.0):
            scale = energy_trace(a, p).values
            assert np.all(energy_trace(a - b, p).values <= 1e-13**p * scale)


class TestNormEstimate:
    @pytest.mark.parametrize("q", [1.0, 2.0, math.inf])
    def test_holds(self, q):
        u0 = gaussian_field(G2, np.eye(2))
        v = gaussian_field(G2, [[0.5, 0.0], [0.0, 2.0]], mean=[1.0, 0.0])
        src = lambda s: (1.0 + math.sin(3 * s)) * v
        times = [0.25, 0.5, 1.0]
        traj = solve_trajectory(u0, times, wavy_path(), src)
        for t, u in traj:
            assert lq_norm(u, q) <= norm_estimate(u0, src, t, wavy_path(), 8, q) * (1 + 1e-10)

    def test_source_free(self):
        u0 = gaussian_field(G1, [[1.0]])
        assert norm_estimate(u0, None, 2.0, IDENT1, 8, 2.0) == lq_norm(u0, 2.0)

    def test_integral_value(self):
        v = GridField(G1, np.ones(256))
        est = norm_estimate(GridField.zeros(G1), lambda s: s * v, 2.0, IDENT1, 4, 1.0)
        assert est == pytest.approx(2.0 * 40.0, rel=1e-14)


class TestDecay:
    def test_hand_constant(self):
        dd = DecayData(IDENT1, alpha=2.0, gamma=1.0)
        b = decay_bound(1.0, ExponentTriple(2.0, 1.0, 2.0), dd, 1.0)
        expected = (4 * math.pi) ** -0.25 * 2 ** -0.25
        assert b.value == pytest.approx(expected, rel=1e-12)
        assert b.simplified == pytest.approx(expected, rel=1e-12)

    def test_constant(self):
        assert decay_constant(1.0, 3) == 1.0
        assert decay_constant(math.inf, 2) == pytest.approx(1 / (4 * math.pi), rel=1e-15)

    def test_p_one_no_decay(self):
        dd = DecayData(IDENT1, alpha=2.0)
        tr = ExponentTriple(1.0, 2.0, 2.0)
        b = decay_bound(3.0, tr, dd, 5.0, f_beta_norm=2.0)
        # exponent zero: bound = ||u0|| + ||f||_{L^beta} t^{1/alpha}
        assert b.value == pytest.approx(5.0 + 2.0 * math.sqrt(3.0), rel=1e-12)

    def test_inadmissible(self):
        dd = DecayData(IDENT2, alpha=2.0)
        with pytest.raises(InadmissibleExponents):
            decay_bound(1.0, ExponentTriple(2.0, 1.0, 2.0), dd, 1.0)

    def test_zero_accumulation(self):
        with pytest.raises(ZeroAccumulation):
            decay_bound(0.0, ExponentTriple(2.0, 1.0, 2.0), DecayData(IDENT1), 1.0)

    def test_data_validation(self):
        with pytest.raises(InvalidExponent):
            DecayData(IDENT1, alpha=1.0)
        with pytest.raises(ValueError):
            DecayData(IDENT1, gamma=0.0)
        assert DecayData(IDENT1, alpha=3.0).beta == pytest.approx(1.5)

    def test_F_nondecreasing(self):
        dd = DecayData(wavy_path())
        vals = [dd.lower_integral(t) for t in np.linspace(0, 3, 13)]
        assert vals[0] == 0.0
        assert np.all(np.diff(vals) >= 0)

    def test_F_piecewise_exact(self):
        path = DiffusivityPath.piecewise([[[1.0]], [[3.0]]], [1.0])
        assert DecayData(path).lower_integral(2.0) == pytest.approx(4.0, rel=1e-14)

    def test_measured_below_bound(self):
        u0 = gaussian_field(G2, [[0.3, 0.05], [0.05, 0.2]])
        tr = ExponentTriple.from_qr(1.0, 2.0)
        dd = DecayData(wavy_path(), alpha=1.5, gamma=0.45)
        times = np.logspace(-1, 1, 20)
        traj = solve_trajectory(u0, times, wavy_path())
        prev = math.inf
        for t, u in traj:
            b = decay_bound(t, tr, dd, lq_norm(u0, 1.0))
            assert lq_norm(u, 2.0) <= b.value * (1 + 1e-8)
            assert lq_norm(u, 2.0) <= b.simplified * (1 + 1e-8)
            assert b.value <= prev
            prev = b.value

    @pytest.mark.parametrize("kappa", [0.0, 0.25, 0.5, 0.9])
    def test_singular_integral_closed_form(self, kappa):
        # constant lambda_min = c: int_0^t (c (t - s))^{-kappa} ds = c^{-kappa} t^{1-kappa} / (1 - kappa)
        dd = DecayData(DiffusivityPath.constant([[2.0]]))
        t = 1.7
        exact = 2.0 ** -kappa * t ** (1 - kappa) / (1 - kappa)
        assert _singular_integral(t, kappa, dd) == pytest.approx(exact, rel=1e-9)

    def test_singular_integral_with_kink(self):
        path = DiffusivityPath.piecewise([[[1.0]], [[4.0]]], [1.0])
        dd = DecayData(path)
        # F(2) - F(s) = 4 (2 - s) on (1, 2), 4 + (1 - s) on (0, 1)
        exact = (4.0 ** -0.5) * 2.0 + 2.0 * (math.sqrt(5.0) - 2.0)
        assert _singular_integral(2.0, 0.5, dd) == pytest.approx(exact, rel=1e-9)

    def test_inhomogeneous_bound_holds(self):
        u0 = gaussian_field(G1, [[0.4]])
        v = gaussian_field(G1, [[1.0]], mean=[2.0])
        src = lambda s: math.exp(-s) * v
        tr = ExponentTriple.from_qr(1.0, 2.0)
        dd = DecayData(IDENT1, alpha=2.0)
        traj = solve_trajectory(u0, [0.5, 1.0, 2.0], IDENT1, src)
        for t, u in traj:
            fb = source_beta_norm(src, t, IDENT1, 8, 1.0, dd.beta)
            assert lq_norm(u, 2.0) <= decay_bound(t, tr, dd, lq_norm(u0, 1.0), fb).value


class TestCsv:
    def test_columns(self, tmp_path):
        write_bound_csv(tmp_path / "b.csv", [BoundRow(0.5, 1.0, 2.0), BoundRow(1.0, 3.0, 2.0)])
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "t,lhs,bound,margin,satisfied"
        assert lines[1] == "0.5,1.0,2.0,1.0,true"
        assert lines[2].endswith(",false")
