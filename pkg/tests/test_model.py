import numpy as np
import pytest

from invasim import model as m
from invasim.errors import InvasionFails, NoEquilibrium
from invasim.model import Family, ModelSpec, StabilityClass

LV_C = [[1.0, 0.6], [0.5, 1.0]]


def random_models(rng, n):
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            g = rng.uniform(0.1, 3.0)
            out.append(ModelSpec.sir(g * rng.uniform(1.01, 4.0), g))
        else:
            d_R, d_M = rng.uniform(0, 2, 2)
            c = rng.uniform(0.05, 2.0, (2, 2))
            out.append(ModelSpec.lotka_volterra(d_R + rng.uniform(0.1, 3), d_R,
                                                d_M + rng.uniform(0.1, 3), d_M, c))
    return out


class TestModelSpec:
    def test_param_names_enforced(self):
        with pytest.raises(ValueError):
            ModelSpec(Family.SIR, {"beta": 1.0})
        with pytest.raises(ValueError):
            ModelSpec(Family.SIR, {"beta": 1.0, "gamma": 1.0, "delta": 2.0})
        with pytest.raises(ValueError):
            ModelSpec("logistic", {})

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec.sir(float("nan"), 1.0)

    def test_dict_round_trip(self, lv):
        assert ModelSpec.from_dict(lv.to_dict()) == lv
        assert hash(ModelSpec.from_dict(lv.to_dict())) == hash(lv)

    def test_immutable(self, sir):
        with pytest.raises(TypeError):
            sir.params["beta"] = 2.0


class TestRates:
    def test_sir_at_equilibrium(self, sir):
        assert m.rates(sir, (1.0, 0.0)) == (0.0, 0.0, 1.5, 1.0)

    def test_sir_empty_pool(self, sir):
        assert m.rates(sir, (0.0, 0.0)) == (0.0, 0.0, 0.0, 1.0)

    def test_lv_hand_values(self, lv):
        assert m.rates(lv, (1.0, 0.0)) == pytest.approx((2.0, 2.0, 3.0, 1.5), abs=1e-15)

    def test_growth_rates_examples(self, sir, lv):
        assert m.growth_rates(sir, (1.0, 0.0)) == pytest.approx((0.0, 0.5))
        assert m.growth_rates(sir, (2 / 3, 0.37))[1] == pytest.approx(0.0, abs=1e-15)
        assert m.growth_rates(lv, (1.0, 0.0)) == pytest.approx((0.0, 1.5))

    def test_growth_consistent_with_rates(self):
        rng = np.random.default_rng(1)
        for model in random_models(rng, 20):
            for x in rng.uniform(0, 3, (500, 2)):
                b_R, d_R, b_M, d_M = m.rates(model, x)
                F_R, F_M = m.growth_rates(model, x)
                assert F_R == b_R - d_R and F_M == b_M - d_M
                assert min(b_R, d_R, b_M, d_M) >= 0


class TestDerive:
    def test_sir(self, sir):
        d = m.derive(sir)
        assert (d.x_R_star, d.b_star, d.d_star, d.r_star) == (1.0, 1.5, 1.0, 0.5)
        assert d.stability_class is StabilityClass.PARTIALLY_HYPERBOLIC
        # 1 - g + g log g with g = 2/3
        assert d.v_star_closed_form == pytest.approx(0.0630232613, abs=1e-9)

    def test_lv(self, lv):
        d = m.derive(lv)
        assert d.x_R_star == pytest.approx(1.0)
        assert (d.b_star, d.d_star, d.r_star) == pytest.approx((3.0, 1.5, 1.5))
        assert d.stability_class is StabilityClass.HYPERBOLIC
        assert d.v_star_closed_form == pytest.approx(2.0)

    def test_lv_coexistence_branch(self):
        # F_R(0, x*_M) > 0: peak is the interior fixed point
        model = ModelSpec.lotka_volterra(2.0, 1.0, 3.0, 1.0, [[1.0, 0.2], [0.5, 1.0]])
        # x_R = 1 - 0.2 x_M, x_M = 2 - 0.5 x_R  ->  x_M = 1.5 / 0.9
        assert m.derive(model).v_star_closed_form == pytest.approx(1.5 / 0.9)

    def test_subcritical_raises(self):
        with pytest.raises(InvasionFails):
            m.derive(ModelSpec.sir(1.0, 1.5))

    def test_no_equilibrium_raises(self):
        with pytest.raises(NoEquilibrium):
            m.derive(ModelSpec.lotka_volterra(2.0, 1.0, 3.0, 1.0, [[0.0, 0.6], [0.5, 1.0]]))

    def test_equilibrium_residual_random(self):
        rng = np.random.default_rng(2)
        for model in random_models(rng, 200):
            d = m.derive(model) if m.validate(model).ok else None
            if d is None:
                continue
            assert abs(m.growth_rates(model, (d.x_R_star, 0.0))[0]) <= 1e-12
            assert d.r_star == d.b_star - d.d_star

    def test_stability_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        h = 1e-6
        for model in random_models(rng, 100):
            if not m.validate(model).ok:
                continue
            x = m.derive(model).x_R_star
            fd = (m.growth_rates(model, (x + h, 0))[0] - m.growth_rates(model, (x - h, 0))[0]) / (2 * h)
            expect = StabilityClass.PARTIALLY_HYPERBOLIC if abs(fd) < 1e-4 else StabilityClass.HYPERBOLIC
            assert m.stability_class(model) is expect


class TestChannels:
    def test_sir_channel_rates(self, sir):
        ch = {c.label: c for c in m.channels(sir)}
        assert set(ch) == {"infection", "recovery"}
        assert ch["infection"].stoichiometry == (-1, 1)
        assert ch["infection"].rate(99999, 1, 1e5) == pytest.approx(1.499985, rel=1e-12)
        assert ch["recovery"].rate(99999, 1, 1e5) == pytest.approx(1.0)

    def test_lv_equilibrium_balance(self, lv):
        ch = {c.label: c for c in m.channels(lv)}
        assert ch["resident_birth"].rate(100000, 0, 1e5) == pytest.approx(2e5)
        assert ch["resident_death"].rate(100000, 0, 1e5) == pytest.approx(2e5)

    @pytest.mark.parametrize("name", ["sir", "lv"])
    def test_mutant_channels_vanish_without_mutants(self, name, request):
        model = request.getfixturevalue(name)
        for c in m.channels(model):
            if c.stoichiometry[1] != 0:
                assert c.rate(500, 0, 1000.0) == 0.0

    def test_rates_finite_nonnegative(self):
        rng = np.random.default_rng(4)
        for model in random_models(rng, 20):
            chans = m.channels(model)
            for n_R, n_M in rng.integers(0, 5000, (200, 2)):
                rates = np.array([c.rate(int(n_R), int(n_M), 1000.0) for c in chans])
                assert np.all(np.isfinite(rates)) and np.all(rates >= 0)
                mut = sum(r for r, c in zip(rates, chans) if c.stoichiometry[1] != 0)
                assert (mut == 0) == (n_M == 0)


class TestThresholdScale:
    def test_values(self, sir, lv):
        assert m.admissible_threshold_scale(lv, 100_000) == 8685
        assert m.admissible_threshold_scale(sir, 100_000) == 754
        assert m.admissible_threshold_scale(sir, 2) >= 1
        assert m.admissible_threshold_scale(lv, 2) >= 1

    def test_bad_K(self, sir):
        with pytest.raises(ValueError):
            m.admissible_threshold_scale(sir, 1)


class TestValidate:
    def test_sir_passes(self, sir):
        rep = m.validate(sir)
        assert rep.ok and rep.failed == []

    def test_sir_boundary_fails_invasion(self):
        rep = m.validate(ModelSpec.sir(1.0, 1.0))
        assert rep.failed == ["(I)"]
        assert any(line.startswith("(I) fails") for line in rep.lines())

    def test_lv_without_self_competition(self):
        rep = m.validate(ModelSpec.lotka_volterra(2.0, 1.0, 3.0, 1.0, [[0.0, 0.6], [0.5, 1.0]]))
        assert "(E)" in rep.failed

    def test_negative_parameter(self):
        rep = m.validate(ModelSpec.sir(-1.0, 1.0))
        assert "positivity" in rep.failed
        assert not rep.ok

    def test_never_raises_on_garbage(self):
        for c in ([[0, 0], [0, 0]], [[-1, 0], [0, -1]]):
            rep = m.validate(ModelSpec.lotka_volterra(0.0, 5.0, 0.0, 5.0, c))
            assert not rep.ok
