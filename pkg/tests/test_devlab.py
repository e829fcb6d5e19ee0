import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from mvlab.devlab import (
    Control,
    Skeleton,
    SupEvent,
    exit_rate,
    exponential_equivalence_check,
    girsanov_is_estimate,
    mdp_decay_experiment,
    rate_function,
    solve_skeleton,
)
from mvlab.engine import BrownianBundle, TimeGrid, lambda_scale, solve_limit_ode
from mvlab.errors import ContractViolation
from mvlab.model import CoefficientModel, kuramoto, linear_mean_field

GRID = TimeGrid(1.0, 1000)


def limit_of(model, x0=1.0, grid=GRID):
    return solve_limit_ode(model, [x0], grid)


def planar_model(s1=1.0, s2=2.0):
    """Drift-free 2-d model with diagonal noise, for the d > 1 branches."""
    S = np.diag([s1, s2])
    return CoefficientModel(
        dim=2,
        drift=lambda t, x, mu: np.zeros_like(x),
        diffusion=lambda t, x, mu: np.broadcast_to(S, x.shape[:-1] + (2, 2)),
        grad_drift=lambda t, x, mu: np.zeros(x.shape[:-1] + (2, 2)),
        lderiv_drift=lambda t, x, mu, y: np.zeros(np.broadcast_shapes(x.shape, y.shape)[:-1] + (2, 2)),
        lipschitz_bound=lambda t: max(s1, s2),
    )


# -- controls and skeleton ---------------------------------------------------


def test_control_energy_and_path():
    c = Control(TimeGrid(2.0, 4), [1.0, -1.0, 2.0, 0.0])
    assert c.energy == 0.5 * 0.5 * (1 + 1 + 4)
    assert c.path()[0, 0] == 0.0
    assert c.path()[-1, 0] == pytest.approx(0.5 * 2.0)
    with pytest.raises(ContractViolation):
        Control(TimeGrid(1.0, 3), [1.0, 2.0])


def test_skeleton_zero_control():
    m = kuramoto(1.0, 0.5, 1.0)
    y = solve_skeleton(m, limit_of(m), Control.zeros(GRID))
    assert np.all(y.values == 0.0)


def test_skeleton_drift_free_is_integral_of_control():
    m = linear_mean_field(0.0, 0.6, 1.0)
    y = solve_skeleton(m, limit_of(m), Control.constant(GRID, 2.5))
    assert np.allclose(y.values[:, 0], 2.5 * GRID.nodes, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("a,s", [(1.0, 1.0), (-0.7, 2.0), (2.0, 0.5)])
def test_skeleton_variation_of_constants(a, s):
    m = linear_mean_field(a, 0.3, s)
    y = solve_skeleton(m, limit_of(m), Control.constant(GRID, 1.0))
    assert abs(y.values[-1, 0] - s / a * np.expm1(a)) < 1e-8


def test_skeleton_grid_mismatch():
    m = linear_mean_field(1, 0, 1)
    with pytest.raises(ContractViolation):
        solve_skeleton(m, limit_of(m), Control.zeros(TimeGrid(1.0, 10)))


SKELETON_MODELS = [linear_mean_field(0.8, 0.5, 1.3), kuramoto(1.2, 0.7, 0.9)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0, 1]))
def test_skeleton_superposition(seed, which):
    m = SKELETON_MODELS[which]
    g = TimeGrid(1.0, 200)
    sk = Skeleton.from_model(m, limit_of(m, grid=g))
    rng = np.random.default_rng(seed)
    h1, h2 = rng.normal(size=(2, g.steps, 1))
    a, b = rng.normal(size=2)
    lhs = sk.propagate(a * h1 + b * h2)
    rhs = a * sk.propagate(h1) + b * sk.propagate(h2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def gronwall_constant(sk, model, grid):
    K_int = grid.dt * sum(model.lipschitz_bound(k * grid.dt) for k in range(grid.steps))
    sig_int = grid.dt * np.sum(np.linalg.norm(sk.S[:-1], ord=2, axis=(1, 2)) ** 2)
    return np.exp(K_int) * np.sqrt(sig_int)


@pytest.mark.parametrize("model", SKELETON_MODELS, ids=lambda m: m.name)
def test_skeleton_bound_on_energy_ball(model, rng):
    g = TimeGrid(1.0, 400)
    sk = Skeleton.from_model(model, limit_of(model, grid=g))
    C = gronwall_constant(sk, model, g)
    N = 3.0
    for _ in range(100):
        h = Control(g, rng.normal(size=(g.steps, 1)) * rng.uniform(0.1, 5))
        h = h.scaled(np.sqrt(N / h.energy) * rng.uniform(0, 1))
        assert h.energy <= N
        assert np.max(np.abs(sk.propagate(h.hdot))) <= C * np.sqrt(2 * N)


@pytest.mark.parametrize("model", SKELETON_MODELS, ids=lambda m: m.name)
def test_skeleton_lipschitz_in_control(model, rng):
    g = TimeGrid(1.0, 400)
    sk = Skeleton.from_model(model, limit_of(model, grid=g))
    C = gronwall_constant(sk, model, g)
    for _ in range(100):
        h1, h2 = rng.normal(size=(2, g.steps, 1)) * rng.uniform(0.1, 3, size=2)[:, None, None]
        l2 = np.sqrt(g.dt * np.sum((h1 - h2) ** 2))
        assert np.max(np.abs(sk.propagate(h1) - sk.propagate(h2))) <= C * l2


# -- rate function --------------------------------------------------------


def test_rate_of_zero_path():
    m = kuramoto(1.0, 0.3, 1.0)
    res = rate_function(m, limit_of(m), np.zeros((GRID.steps + 1, 1)))
    assert res.value == 0.0
    assert np.all(res.optimal_control.hdot == 0.0)


def test_rate_of_straight_line():
    m = linear_mean_field(0.0, 0.9, 1.0)
    res = rate_function(m, limit_of(m), GRID.nodes[:, None])
    # hdot = g' - a g = 1, energy = 1/2
    assert abs(res.value - 0.5) < 1e-8
    assert np.allclose(res.optimal_control.hdot, 1.0)


def test_rate_quadratic_scaling(rng):
    m = linear_mean_field(0.8, 0.2, 1.5)
    lim = limit_of(m)
    g = np.cumsum(np.concatenate([[0.0], rng.normal(size=GRID.steps) * 0.05]))[:, None]
    base = rate_function(m, lim, g).value
    for alpha in (2.0, -3.0, 0.1):
        assert rate_function(m, lim, alpha * g).value == pytest.approx(alpha**2 * base, rel=1e-12)


@pytest.mark.parametrize("model", SKELETON_MODELS, ids=lambda m: m.name)
def test_rate_round_trip(model, rng):
    lim = limit_of(model)
    sk = Skeleton.from_model(model, lim)
    for _ in range(20):
        h = Control(GRID, rng.normal(size=(GRID.steps, 1)))
        g = solve_skeleton(model, lim, h, sk)
        res = rate_function(model, lim, g, system=sk)
        assert abs(res.value - h.energy) <= 1e-8
        assert res.residual < res.tolerance


def test_rate_unattainable_is_infinite():
    m = linear_mean_field(0.5, 0.5, 0.0)  # no noise: only g = 0 is reachable
    res = rate_function(m, limit_of(m), GRID.nodes[:, None])
    assert res.value == np.inf and not res.attainable
    assert res.optimal_control is None


def test_rate_least_norm_for_singular_noise():
    g = TimeGrid(1.0, 100)
    m = planar_model(1.0, 0.0)
    lim = solve_limit_ode(m, [0.0, 0.0], g)
    target = np.stack([g.nodes, np.zeros_like(g.nodes)], axis=1)
    assert rate_function(m, lim, target).value == pytest.approx(0.5, rel=1e-12)
    target[:, 1] = g.nodes
    assert rate_function(m, lim, target).value == np.inf


def test_rate_requires_zero_start():
    m = linear_mean_field(0, 0, 1)
    with pytest.raises(ContractViolation):
        rate_function(m, limit_of(m), GRID.nodes[:, None] + 1.0)


def test_rate_positive_definite(rng):
    for m in SKELETON_MODELS:
        lim = limit_of(m)
        g = np.cumsum(np.concatenate([[0.0], rng.normal(size=GRID.steps) * 0.01]))[:, None]
        assert rate_function(m, lim, g).value > 0
        assert rate_function(m, lim, np.zeros_like(g)).value == 0


# -- exit rate ------------------------------------------------------------


@pytest.mark.parametrize("T,delta", [(1.0, 1.0), (2.0, 0.5)])
def test_exit_rate_brownian(T, delta):
    g = TimeGrid(T, 500)
    m = linear_mean_field(0, 0, 1)
    res = exit_rate(m, limit_of(m, grid=g), delta, "one_sided")
    assert res.value == pytest.approx(delta**2 / (2 * T), rel=1e-12)
    assert res.optimal_time == pytest.approx(T)
    assert res.optimal_control.energy == pytest.approx(res.value, rel=1e-12)
    y = solve_skeleton(m, limit_of(m, grid=g), res.optimal_control)
    assert y.values[-1, 0] == pytest.approx(delta, rel=1e-12)


def test_exit_rate_scalings():
    m = linear_mean_field(0, 0.4, 1)
    lim = limit_of(m)
    base = exit_rate(m, lim, 0.7).value
    assert exit_rate(m, lim, 1.4).value == pytest.approx(4 * base, rel=1e-12)
    m2 = linear_mean_field(0, 0.4, 2)
    assert exit_rate(m2, limit_of(m2), 0.7).value == pytest.approx(base / 4, rel=1e-12)


def test_exit_rate_unstable_linear_gramian():
    a, s, R = 1.0, 1.0, 0.8
    m = linear_mean_field(a, 0.0, s)
    res = exit_rate(m, limit_of(m), R, "one_sided")
    gramian = s**2 * np.expm1(2 * a) / (2 * a)
    assert res.value == pytest.approx(R**2 / (2 * gramian), rel=2e-3)


def test_exit_rate_stable_linear_optimum_at_horizon():
    m = linear_mean_field(-2.0, 0.0, 1.0)
    res = exit_rate(m, limit_of(m), 0.5)
    # continuous Gramian (1 - e^{-4t})/4 increases in t, so the optimum is at T
    assert res.optimal_index == GRID.steps
    assert np.all(np.diff(res.costs[1:]) <= 0)


def test_exit_rate_planar():
    g = TimeGrid(1.0, 100)
    m = planar_model(1.0, 2.0)
    lim = solve_limit_ode(m, [0.0, 0.0], g)
    assert exit_rate(m, lim, 1.0, "two_sided").value == pytest.approx(1 / 8, rel=1e-12)
    assert exit_rate(m, lim, 1.0, "one_sided").value == pytest.approx(1 / 2, rel=1e-12)


def test_exit_rate_without_noise():
    m = linear_mean_field(0.3, 0.0, 0.0)
    res = exit_rate(m, limit_of(m), 1.0)
    assert res.value == np.inf and "not_controllable" in res.flags


# -- importance sampling ------------------------------------------------------


def brownian_setup(replicas=10_000, steps=1000, seed=31):
    g = TimeGrid(1.0, steps)
    return linear_mean_field(0, 0, 1), g, BrownianBundle.generate(seed, replicas, g)


def test_is_certain_event():
    m, g, noise = brownian_setup(4000, 200)
    shift = Control.constant(g, 0.3)
    r = girsanov_is_estimate(m, [0.0], 1e-2, 4.0, SupEvent(0.0), shift, g, noise, particles=1)
    assert abs(r.mean_weight - 1) < 4 * r.weight_standard_error
    assert r.probability == r.mean_weight


def test_is_zero_shift_is_plain_monte_carlo():
    m, g, noise = brownian_setup(4000, 200)
    r = girsanov_is_estimate(m, [0.0], 1e-2, 3.0, SupEvent(0.5), None, g, noise, particles=1, monitoring="grid")
    xbar = noise.paths()[:, :, 0] / 3.0
    assert r.mean_weight == 1.0 and r.weight_standard_error == 0.0
    assert r.probability == np.mean(np.max(xbar, axis=1) >= 0.5)


def test_is_reflection_principle():
    m, g, noise = brownian_setup()
    lam = 10.0
    delta = 3.0 / lam
    shift = exit_rate(m, solve_limit_ode(m, [0.0], g), delta, "one_sided").optimal_control
    r = girsanov_is_estimate(m, [0.0], 1e-2, lam, SupEvent(delta), shift, g, noise, particles=1)
    assert abs(r.probability - 2 * norm.cdf(-3.0)) < 4 * r.standard_error


def test_is_extreme_shift_underflows_instead_of_overflowing():
    # log R = -lam <hdot, dW> - lam^2 |hdot|^2 dt / 2 is dominated by the quadratic term
    m, g, noise = brownian_setup(200, 100)
    shift = Control.constant(g, 1e3)
    r = girsanov_is_estimate(m, [0.0], 1e-2, 40.0, SupEvent(0.1), shift, g, noise, particles=1)
    assert r.excluded == 0
    assert r.mean_weight == 0.0 and r.probability == 0.0


def test_is_with_interacting_model_keeps_density_normalised():
    g = TimeGrid(1.0, 200)
    m = kuramoto(1.0, 0.5, 1.0)
    noise = BrownianBundle.generate(7, 4000, g)
    shift = Control.constant(g, 0.5)
    r = girsanov_is_estimate(m, [0.2], 1e-2, 2.0, SupEvent(0.0), shift, g, noise, particles=256)
    assert abs(r.mean_weight - 1) < 4 * r.weight_standard_error


# -- decay experiments ----------------------------------------------------


LADDER = [1e-2, 1e-3, 1e-4, 1e-5]


@pytest.mark.parametrize("side", ["one_sided", "two_sided"])
def test_mdp_decay_brownian(side):
    rows = mdp_decay_experiment(linear_mean_field(0, 0, 1), [0.0], 0.25, LADDER, SupEvent(1.0, side),
                                TimeGrid(1.0, 500), seed=8, replicas=2048, particles=1)
    assert rows[-1].predicted == pytest.approx(-0.5)
    assert abs(rows[-1].normalized_log_prob + 0.5) <= 0.15 * 0.5
    # the normalised log-probability approaches the limit from below
    vals = [r.normalized_log_prob for r in rows]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_mdp_rejects_bad_alpha():
    with pytest.raises(ContractViolation):
        mdp_decay_experiment(linear_mean_field(0, 0, 1), [0.0], 0.0, LADDER, SupEvent(1.0), TimeGrid(1.0, 10), seed=1)


def test_gaussian_tail_oracle_consistency():
    # Gaussian tail expansion: lambda^-2 log 2 Phi(-lambda) -> -1/2
    vals = [np.log(2 * norm.cdf(-lambda_scale(e, 0.25))) / lambda_scale(e, 0.25) ** 2 for e in LADDER]
    assert abs(vals[-1] + 0.5) < 0.15 * 0.5


def test_exp_equivalence_law_free_model():
    rows = exponential_equivalence_check(linear_mean_field(0.7, 0.0, 1.0), [1.0], 0.25, LADDER, 1e-6,
                                         TimeGrid(1.0, 200), seed=3, replicas=256, particles=64)
    assert all(r.probability == 0.0 and r.mean_gap == 0.0 for r in rows)


def test_exp_equivalence_trend():
    rows = exponential_equivalence_check(linear_mean_field(0.5, 0.5, 1.0), [1.0], 0.25, LADDER, 0.1,
                                         TimeGrid(1.0, 200), seed=3, replicas=512, particles=16)
    probs = [r.probability for r in rows]
    gaps = [r.mean_gap for r in rows]
    assert all(b <= a for a, b in zip(probs, probs[1:]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    for r in rows:
        if r.probability > 0:
            assert r.normalized_log_prob == pytest.approx(np.log(r.probability) / r.lam**2)
            assert r.eps_log_prob == pytest.approx(r.epsilon * np.log(r.probability))


def test_exp_equivalence_huge_threshold():
    rows = exponential_equivalence_check(linear_mean_field(0.5, 0.5, 1.0), [1.0], 0.25, LADDER, 1e3,
                                         TimeGrid(1.0, 100), seed=3, replicas=256, particles=64)
    assert all(r.probability == 0.0 and r.normalized_log_prob == -np.inf for r in rows)
