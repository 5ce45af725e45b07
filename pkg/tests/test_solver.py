import numpy as np
import pytest

from hessolve import bounds, models, oracle, solver
from hessolve.block_chain import BlockGenerator, LevelVector
from hessolve.errors import ContractError, ModelError
from hessolve.solver import TruncationSchedule


def _single_level(Q00):
    Q00 = np.asarray(Q00, dtype=float)
    return BlockGenerator(Q00.shape[0], lambda k, l: Q00 if k == l == 0 else None, max_level=0)


def test_init_state_scalar():
    st = solver.init_state(_single_level([[-1.0]]))
    np.testing.assert_array_equal(st.Ustar_nn, [[1.0]])
    np.testing.assert_array_equal(st.ustar, [1.0])


def test_init_state_triangular():
    st = solver.init_state(_single_level([[-2.0, 1.0], [0.0, -3.0]]))
    np.testing.assert_allclose(st.Ustar_nn, [[0.5, 1 / 6], [0.0, 1 / 3]], rtol=1e-15)
    np.testing.assert_allclose(st.ustar, [0.5 + 1 / 6, 1 / 3], rtol=1e-15)


def test_init_state_singular():
    with pytest.raises(ModelError, match="level 0 not transient under censoring"):
        solver.init_state(_single_level([[-1.0, 1.0], [1.0, -1.0]]))


def test_advance_mm1(mm1):
    st = solver.advance(solver.init_state(mm1), mm1)
    assert st.n == 1
    np.testing.assert_allclose(st.Ustar_nn, [[1.0]], rtol=1e-15)
    np.testing.assert_allclose(st.U(0), [[2.0]], rtol=1e-15)
    np.testing.assert_allclose(st.ustar, [3.0], rtol=1e-15)


def test_advance_decoupled_level():
    rng = np.random.default_rng(3)
    ups = {k: rng.uniform(0.1, 1, (2, 2)) for k in range(6)}

    def block(k, l):
        if l == k + 1:
            return ups[k]
        if l == k:
            return rng_fixed_within(k) - np.diag(ups[k].sum(1) + rng_fixed_within(k).sum(1)
                                                 + (3.0 if k not in (0, 3) else 0.0))
        if l == k - 1 and k != 3:
            return np.full((2, 2), 1.5)
        return None

    def rng_fixed_within(k):
        return np.array([[0.0, 0.2 + 0.1 * k], [0.3, 0.0]])

    gen = BlockGenerator(2, block)
    st = solver.solve_state(gen, 3)
    Un = np.linalg.inv(-gen.block(3, 3))
    np.testing.assert_allclose(st.Ustar_nn, Un, rtol=1e-13)
    for k in range(3):
        np.testing.assert_array_equal(st.U(k), 0.0)
    np.testing.assert_allclose(st.ustar, Un.sum(axis=1), rtol=1e-13)


def test_lemma1_bottom_row_random_ldqbd():
    gen = oracle.random_generator(11, max_dim=2, bandwidth=1)
    st = solver.solve_state(gen, 3)
    X = oracle.censored_expected_sojourn(gen, 3)
    bottom = X[-gen.dim(3):, :]
    np.testing.assert_allclose(st.row, bottom, rtol=1e-10)


def test_state_invariants_random():
    for seed in range(5):
        gen = oracle.random_generator(seed)
        st = solver.init_state(gen)
        for _ in range(12):
            st = solver.advance(st, gen)
            assert np.all(st.row >= 0) and np.all(st.ustar > 0)
            np.testing.assert_allclose(st.ustar, st.row.sum(axis=1), rtol=1e-12)
            np.testing.assert_array_equal(st.Ustar_nk[-1], st.Ustar_nn)
            assert len(st.Ustar_nk) == st.n + 1


@pytest.mark.parametrize("y,u,j", [
    ([5.0, 2.0, 4.0], [1.0, 1.0, 2.0], 1),
    ([3.0, 3.0], [1.0, 2.0], 1),
    ([7.0], [2.0], 0),
])
def test_optimal_alpha_examples(y, u, j):
    st = solver.SolverState(0, (len(u),), np.diag(u), np.array(u))
    j_star, alpha = solver.optimal_alpha(st, y)
    assert j_star == j
    np.testing.assert_array_equal(alpha, solver.indicator(len(u), j))


def test_optimal_alpha_width_checked():
    st = solver.SolverState(0, (2,), np.eye(2), np.ones(2))
    with pytest.raises(ContractError):
        solver.optimal_alpha(st, [1.0, 2.0, 3.0])


def test_approximation_mm1(mm1):
    st = solver.solve_state(mm1, 1)
    pi = solver.approximation(st, [1.0])
    np.testing.assert_allclose(pi.data, [2 / 3, 1 / 3], rtol=1e-15)


def test_approximation_counterexample_last_phase(counterexample):
    st = solver.init_state(counterexample)
    for k in range(1, 6):
        st = solver.advance_to(st, counterexample, 2 * k)
        pi = solver.approximation(st, [0.0, 1.0])
        expected = np.zeros(pi.data.size)
        expected[-1] = 1.0
        np.testing.assert_allclose(pi.data, expected, atol=1e-12)


def test_approximation_rejects_bad_alpha(mm1):
    st = solver.solve_state(mm1, 2)
    with pytest.raises(ContractError):
        solver.approximation(st, [0.5])
    with pytest.raises(ContractError):
        solver.approximation(st, [1.0, 0.0])


def test_approximation_indicator_normalized():
    gen = oracle.random_generator(4)
    st = solver.solve_state(gen, 9)
    for j in range(gen.dim(9)):
        pi = solver.approximation(st, solver.indicator(gen.dim(9), j))
        assert abs(pi.data.sum() - 1.0) < 1e-14


def test_tv_examples():
    p = LevelVector([0.5, 0.5], (1, 1))
    q = LevelVector([0.5, 0.3, 0.2], (1, 1, 1))
    assert solver.tv_distance(p, p) == 0.0
    assert solver.tv_distance(p, q) == pytest.approx(0.4, abs=1e-15)
    assert solver.tv_distance([1.0], [0.0, 1.0]) == 2.0


def test_schedule_levels():
    assert list(TruncationSchedule(step=10, cap=35).levels()) == [10, 20, 30, 35]
    assert list(TruncationSchedule(step=10, cap=30).levels()) == [10, 20, 30]
    geo = list(TruncationSchedule("geometric", ratio=2.0, cap=100).levels())
    assert geo == [10, 20, 40, 80, 100]
    assert TruncationSchedule.parse("arithmetic:5").step == 5
    assert TruncationSchedule.parse("geometric:1.5").ratio == 1.5
    for bad in ("linear:3", "arithmetic:x", "geometric:0.5"):
        with pytest.raises(ContractError):
            TruncationSchedule.parse(bad)
    with pytest.raises(ContractError):
        TruncationSchedule(step=10, cap=5)


def test_run_mm1(mm1):
    res = solver.run(mm1, bounds.mm1_certificate(1.0, 2.0), epsilon=1e-8)
    assert res.converged
    exact = [oracle.mm1_closed_form(1.0, 2.0, k) for k in range(res.stop_level + 1)]
    assert np.abs(res.pi_hat.marginals() - exact).sum() < 1e-6
    assert len(res.tv_history) == len(res.checkpoints) - 1
    assert res.tv_history[-1] < 1e-8
    assert res.bound is None


def test_run_epsilon_range(mm1):
    cert = bounds.mm1_certificate(1.0, 2.0)
    for eps in (0.0, 1.0, 2.0, -1e-3):
        with pytest.raises(ContractError, match=r"epsilon must lie in \(0,1\)"):
            solver.run(mm1, cert, epsilon=eps)


def test_run_cap_not_converged(mm1):
    res = solver.run(mm1, bounds.mm1_certificate(1.0, 2.0), TruncationSchedule(step=5, cap=12),
                     epsilon=1e-14)
    assert not res.converged
    assert res.checkpoints == [5, 10, 12]
    assert res.pi_hat.top_level == 12


def test_run_reports_bound_with_inputs(mm1):
    cert = bounds.mm1_certificate(1.0, 2.0, beta=1.0, phi_bar=0.1)
    res = solver.run(mm1, cert)
    assert res.bound is not None and res.bound >= 2 * res.r_history[-1]


def test_run_fixed_alpha_mm1_matches_run(mm1):
    cert = bounds.mm1_certificate(1.0, 2.0)
    a = solver.run(mm1, cert)
    b = solver.run_fixed_alpha(mm1, alpha_rule=lambda n: [1.0], cert=cert)
    np.testing.assert_array_equal(a.pi_hat.data, b.pi_hat.data)
    assert a.r_history == b.r_history


def test_run_fixed_alpha_optimal_rule_matches_run(retrial_spec):
    gen = models.retrial_generator(retrial_spec)
    cert = bounds.retrial_certificate(retrial_spec)

    def rule(n):
        st = solver.solve_state(gen, n)
        return solver.optimal_alpha(st, bounds.compute_y(st, gen, cert).values)[1]

    a = solver.run(gen, cert)
    b = solver.run_fixed_alpha(gen, alpha_rule=rule, cert=cert)
    np.testing.assert_array_equal(a.pi_hat.data, b.pi_hat.data)
    assert a.j_star_history == b.j_star_history


def test_run_fixed_alpha_counterexample_even_levels(counterexample):
    res = solver.run_fixed_alpha(counterexample, TruncationSchedule(step=2, cap=10),
                                 epsilon=1e-8, alpha_rule=lambda n: [0.0, 1.0])
    assert res.checkpoints[:5] == [2, 4, 6, 8, 10]
    assert not res.converged
    assert res.pi_hat.data[-1] == pytest.approx(1.0, abs=1e-12)
    assert all(t == pytest.approx(2.0, abs=1e-12) for t in res.tv_history)


def test_run_counterexample_optimal_converges(counterexample):
    cert = bounds.counterexample_certificate(models.CounterexampleSpec())
    res = solver.run(counterexample, cert, epsilon=1e-8)
    assert res.converged
    n = res.stop_level
    alpha = solver.indicator(2, res.j_star_history[-1])
    ref = oracle.dense_augmented_solve(counterexample, n, oracle.last_block_alpha(counterexample, n, alpha))
    assert solver.tv_distance(res.pi_hat, ref.pi_hat) < 1e-8


def test_state_round_trip(tmp_path, retrial_spec):
    gen = models.retrial_generator(retrial_spec)
    st = solver.solve_state(gen, 17).with_checkpoint(17, solver.approximation(
        solver.solve_state(gen, 17), [1.0, 0.0, 0.0]))
    back = solver.SolverState.from_bytes(st.to_bytes())
    assert back.n == st.n and back.dims == st.dims
    np.testing.assert_array_equal(back.row, st.row)
    np.testing.assert_array_equal(back.ustar, st.ustar)
    assert back.last_checkpoint[0] == 17
    np.testing.assert_array_equal(back.last_checkpoint[1].data, st.last_checkpoint[1].data)
    path = tmp_path / "state.npz"
    st.save(path)
    np.testing.assert_array_equal(solver.SolverState.load(path).row, st.row)
    with pytest.raises(ContractError):
        import io

        buf = io.BytesIO()
        np.savez(buf, format=np.array("other"))
        solver.SolverState.from_bytes(buf.getvalue())


def test_resume_matches_uninterrupted(retrial_spec):
    gen = models.retrial_generator(retrial_spec)
    cert = bounds.retrial_certificate(retrial_spec)
    full = solver.run(gen, cert, epsilon=1e-10)
    part = solver.run(gen, cert, TruncationSchedule(cap=20), epsilon=1e-10)
    assert not part.converged
    blob = part.state.to_bytes()
    rest = solver.run(gen, cert, epsilon=1e-10, state=solver.SolverState.from_bytes(blob))
    assert rest.converged and rest.stop_level == full.stop_level
    np.testing.assert_array_equal(rest.pi_hat.data, full.pi_hat.data)
    assert part.tv_history + rest.tv_history == full.tv_history


def test_threads_identical():
    gen = oracle.random_generator(7, max_dim=3, bandwidth=2)
    a = solver.solve_state(gen, 120, threads=1)
    b = solver.solve_state(gen, 120, threads=4)
    np.testing.assert_array_equal(a.row, b.row)
    np.testing.assert_array_equal(a.ustar, b.ustar)


def test_scaling_invariance():
    gen = oracle.random_generator(5)
    for c in (1e-3, 7.5, 1e4):
        a = solver.solve_state(gen, 12)
        b = solver.solve_state(gen.scaled(c), 12)
        for j in range(gen.dim(12)):
            alpha = solver.indicator(gen.dim(12), j)
            assert solver.tv_distance(solver.approximation(a, alpha),
                                      solver.approximation(b, alpha)) < 1e-12


def test_recursion_stable_deep_into_tail(retrial_spec):
    # u*_n grows like rho^-n; a cancellation-prone diagonal loses all accuracy by n ~ 60
    gen = models.retrial_generator(retrial_spec)
    st = solver.solve_state(gen, 100)
    ratios = []
    prev = solver.solve_state(gen, 99).ustar
    ratios = st.ustar / prev
    np.testing.assert_allclose(ratios, 1 / retrial_spec.rho, rtol=0.05)


def test_non_conservative_rows_match_dense_inverse():
    base = oracle.random_generator(3)

    def block(k, l):
        b = base.block_or_none(k, l)
        if b is not None and k == l and k % 3 == 1:
            b = b - 0.3 * np.eye(b.shape[0])
        return b

    gen = BlockGenerator(base.dim, block, bandwidth=2)
    st = solver.solve_state(gen, 14)
    X = oracle.censored_expected_sojourn(gen, 14)
    np.testing.assert_allclose(st.row, X[-gen.dim(14):], rtol=1e-10)
    assert st.killed is not None
    back = solver.SolverState.from_bytes(st.to_bytes())
    np.testing.assert_array_equal(back.killed, st.killed)
