import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from permrank import (
    SolverConfig,
    brute_force_fit,
    cyclic_design,
    fit,
    predict,
    project_simplex,
    pruned_cyclic_design,
    random_design,
)
from permrank import Permutation
from permrank.core import stable_seed
from permrank.solver import BiasProfile, DisentangledModel, InitScheme, UtilityVector
from permrank.permute import DesignStrategy, PermutationDesign


def single_perm_design(indices, n):
    return PermutationDesign((Permutation(indices),), DesignStrategy.RANDOM, n)


def make_model(a, u):
    return DisentangledModel(
        bias=BiasProfile(tuple(a)),
        utility=UtilityVector(tuple(u)),
        residual_sse=0.0,
        iterations=0,
        restarts_used=1,
        converged=True,
        underdetermined=False,
    )


def model_scores(design, a, u):
    """Independent forward computation: renormalized prefix dot products."""
    a = np.asarray(a, dtype=float)
    u = np.asarray(u, dtype=float)
    out = []
    for p in design.permutations:
        pre = a[: len(p.indices)]
        out.append(float((pre / pre.sum()) @ u[np.asarray(p.indices) - 1]))
    return out


class TestProjectSimplex:
    def test_already_on_simplex(self):
        out = project_simplex([0.2, 0.5, 0.3])
        assert np.allclose(out, [0.2, 0.5, 0.3], atol=1e-12)

    def test_vertex(self):
        assert np.allclose(project_simplex([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_symmetric_point(self):
        assert np.allclose(project_simplex([0.5, 0.5, 0.5]), [1 / 3] * 3)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            project_simplex([])
        with pytest.raises(ValueError):
            project_simplex([np.nan, 1.0])

    @given(
        st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=10)
    )
    def test_output_feasible_and_idempotent(self, values):
        out = project_simplex(values)
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-9
        again = project_simplex(out)
        assert np.allclose(out, again, atol=1e-9)


class TestPredict:
    def test_point_mass_reads_first_position(self):
        d = single_perm_design((2, 1, 3), 3)
        m = make_model((1.0, 0.0, 0.0), (5.0, 7.0, 9.0))
        assert predict(m, d) == [pytest.approx(7.0)]

    def test_uniform_bias_gives_mean(self):
        d = random_design(4, m=5, seed=3)
        m = make_model((0.25,) * 4, (1.0, 2.0, 3.0, 4.0))
        for v in predict(m, d):
            assert v == pytest.approx(2.5)

    def test_hand_computed_value(self):
        d = single_perm_design((3, 2, 1), 3)
        m = make_model((0.5, 0.3, 0.2), (3.0, 1.0, 2.0))
        assert predict(m, d) == [pytest.approx(1.9)]

    def test_dimension_mismatch(self):
        d = random_design(3, seed=0)
        m = make_model((0.5, 0.5), (1.0, 2.0))
        with pytest.raises(ValueError):
            predict(m, d)


class TestFit:
    def test_constant_scores_degenerate(self):
        d = random_design(4, seed=2)
        m = fit(d, [1.5] * len(d), SolverConfig(seed=0))
        assert m.degenerate
        assert m.utility.u == (1.5,) * 4
        assert m.residual_sse < 1e-20
        assert m.converged

    def test_noiseless_all_perms_n3(self):
        d = random_design(3, m=6, seed=1)  # the full universe
        scores = model_scores(d, (0.5, 0.3, 0.2), (3.0, 1.0, 2.0))
        m = fit(d, scores, SolverConfig(restarts=8, seed=0))
        assert m.residual_sse < 1e-8
        assert m.utility.argsort_descending() == (1, 3, 2)
        assert not m.underdetermined
        oracle = brute_force_fit(d, scores, 0.05)
        assert m.residual_sse <= oracle.residual_sse + 1e-6

    def test_cyclic_design_underdetermined(self):
        d = cyclic_design(3)
        scores = model_scores(d, (0.5, 0.3, 0.2), (3.0, 1.0, 2.0))
        m = fit(d, scores, SolverConfig(restarts=4, seed=0))
        assert m.underdetermined
        assert m.residual_sse < 1e-8
        # exact interpolation: predictions reproduce the scores
        assert np.allclose(predict(m, d), scores, atol=1e-6)

    def test_length_mismatch(self):
        d = cyclic_design(3)
        with pytest.raises(ValueError):
            fit(d, [1.0, 2.0], SolverConfig())

    def test_nonfinite_scores(self):
        d = cyclic_design(3)
        with pytest.raises(ValueError):
            fit(d, [1.0, np.inf, 2.0], SolverConfig())

    def test_monotone_loss_trace(self):
        rng = np.random.default_rng(5)
        d = random_design(5, seed=8)
        scores = list(rng.normal(0.0, 2.0, len(d)))  # adversarial: pure noise
        buf = io.StringIO()
        fit(d, scores, SolverConfig(restarts=4, seed=1), trace=buf)
        lines = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert lines
        by_restart = {}
        for entry in lines:
            by_restart.setdefault(entry["restart"], []).append(entry["loss"])
        for losses in by_restart.values():
            assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.sampled_from([2, 3, 5]))
    def test_simplex_feasibility_for_arbitrary_scores(self, seed, n):
        rng = np.random.default_rng(seed)
        d = random_design(n, seed=seed)
        scores = list(rng.normal(0.0, 100.0, len(d)))
        m = fit(d, scores, SolverConfig(restarts=2, seed=seed))
        a = np.asarray(m.bias.a)
        assert (a >= -1e-12).all() and (a <= 1 + 1e-12).all()
        assert abs(a.sum() - 1.0) < 1e-9

    def test_cyclic_sum_identity(self):
        for s in range(20):
            rng = np.random.default_rng(stable_seed("cyc", s))
            n = int(rng.integers(2, 9))
            d = cyclic_design(n)
            scores = list(rng.normal(0.0, 2.0, n))
            m = fit(d, scores, SolverConfig(restarts=2, seed=s))
            assert abs(sum(predict(m, d)) - sum(m.utility.u)) < 1e-9

    def test_score_shift_equivariance(self):
        a = (0.35, 0.25, 0.18, 0.13, 0.09)
        u = (2.0, -1.0, 3.5, 0.5, 1.5)
        d = random_design(5, seed=11)
        scores = model_scores(d, a, u)
        m1 = fit(d, scores, SolverConfig(restarts=8, seed=3))
        m2 = fit(d, [x + 5.0 for x in scores], SolverConfig(restarts=8, seed=3))
        assert m1.utility.argsort_descending() == m2.utility.argsort_descending()
        du = np.asarray(m2.utility.u) - np.asarray(m1.utility.u)
        assert np.abs(du - 5.0).max() < 1e-6

    def test_pruned_design_fit(self):
        a = (0.30, 0.22, 0.18, 0.13, 0.10, 0.07)
        u = (1.0, 4.0, 2.5, 0.5, 3.0, 1.5)
        d = pruned_cyclic_design(6, 3)
        scores = model_scores(d, a, u)
        m = fit(d, scores, SolverConfig(restarts=8, seed=0))
        assert m.residual_sse < 1e-8
        assert m.underdetermined  # 6 equations < 2N-1 = 11
        assert m.utility.argsort_descending() == (2, 5, 3, 6, 1, 4)

    def test_n1(self):
        d = random_design(1, seed=0)
        m = fit(d, [2.5], SolverConfig(seed=0))
        assert m.bias.a == (1.0,)
        assert m.utility.u[0] == pytest.approx(2.5, abs=1e-6)
        assert not m.degenerate

    def test_restarts_used_reported(self):
        d = random_design(4, seed=2)
        scores = model_scores(d, (0.4, 0.3, 0.2, 0.1), (4.0, 1.0, 3.0, 2.0))
        m = fit(d, scores, SolverConfig(restarts=8, seed=0))
        assert 1 <= m.restarts_used <= 8  # early exit on an exact fit

    def test_uniform_init_supported(self):
        d = random_design(3, m=6, seed=4)
        scores = model_scores(d, (0.5, 0.3, 0.2), (3.0, 1.0, 2.0))
        m = fit(d, scores, SolverConfig(restarts=4, seed=0, init=InitScheme.UNIFORM))
        assert m.residual_sse < 1e-8


class TestBruteForceFit:
    def test_recovers_on_grid_truth(self):
        d = random_design(3, m=6, seed=1)
        scores = model_scores(d, (0.5, 0.3, 0.2), (3.0, 1.0, 2.0))
        m = brute_force_fit(d, scores, 0.05)
        assert m.residual_sse < 1e-20
        assert m.utility.argsort_descending() == (1, 3, 2)

    def test_constant_scores_residual_zero(self):
        d = random_design(3, m=6, seed=1)
        m = brute_force_fit(d, [2.0] * 6, 0.25)
        assert m.residual_sse < 1e-20
        assert np.allclose(m.utility.u, 2.0)

    def test_fit_never_worse_than_grid(self):
        for s in range(10):
            rng = np.random.default_rng(stable_seed("bff", s))
            a = rng.dirichlet(np.ones(3))
            u = rng.normal(0.0, 2.0, 3)
            d = random_design(3, m=6, seed=s)
            scores = [x + rng.normal(0, 0.3) for x in model_scores(d, a, u)]
            mf = fit(d, scores, SolverConfig(restarts=8, seed=s))
            mb = brute_force_fit(d, scores, 0.05)
            assert mf.residual_sse <= mb.residual_sse + 1e-6

    def test_oracle_consistency_on_grid_instances(self):
        # noiseless data whose bias lies exactly on the 0.05 grid
        for s in range(10):
            rng = np.random.default_rng(stable_seed("grid", s))
            raw = rng.integers(1, 10, 3)
            a = np.round(raw / raw.sum() * 20) / 20
            a[-1] = 1.0 - a[:-1].sum()
            if a.min() <= 0:
                continue
            u = rng.normal(0.0, 2.0, 3)
            d = random_design(3, m=6, seed=s)
            scores = model_scores(d, a, u)
            mf = fit(d, scores, SolverConfig(restarts=8, seed=s))
            mb = brute_force_fit(d, scores, 0.05)
            assert abs(mf.residual_sse - mb.residual_sse) < 1e-6

    def test_n_too_large(self):
        with pytest.raises(ValueError, match="N too large"):
            brute_force_fit(random_design(6, m=5, seed=0), [0.0] * 5, 0.5)

    def test_grid_step_must_divide_one(self):
        d = random_design(3, m=6, seed=0)
        with pytest.raises(ValueError, match="divide 1"):
            brute_force_fit(d, [0.0] * 6, 0.3)


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(restarts=0)
        with pytest.raises(ValueError):
            SolverConfig(tolerance=0.0)
        with pytest.raises(ValueError):
            SolverConfig(ridge=-1.0)

    def test_bias_profile_validation(self):
        with pytest.raises(ValueError):
            BiasProfile((0.5, 0.6))
        with pytest.raises(ValueError):
            BiasProfile((1.5, -0.5))
