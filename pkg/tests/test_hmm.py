import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tercon.hmm import (
    RATE_FLOOR,
    HmmParams,
    ImpossibleObservationError,
    ObservationSequence,
    _batch_estep,
    baum_welch_fit,
    canonical_permutation,
    canonicalize,
    decode_panel,
    emission_loglik,
    forward_backward,
    read_params,
    viterbi,
    write_params,
)
from tercon.ingest import CountPanel


def make_params(pi, trans, lt, lc):
    return HmmParams(np.array(pi, float), np.array(trans, float), np.array(lt, float), np.array(lc, float))


TWO_STATE = make_params(
    [0.6, 0.4], [[0.8, 0.2], [0.3, 0.7]], [4.0, 0.5], [0.2, 3.0]
)


class TestParams:
    def test_validate_accepts_two_state(self):
        TWO_STATE.validate()

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            make_params([0.5, 0.5], [[0.9, 0.2], [0.3, 0.7]], [1, 1], [1, 1]).validate()

    def test_rejects_negative_rate(self):
        with pytest.raises(ValueError):
            make_params([1.0], [[1.0]], [-0.1], [1.0]).validate()

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            make_params([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [1.0], [1.0]).validate()

    def test_canonical_order_is_terror_share_descending(self):
        scrambled = make_params(
            [0.2, 0.3, 0.5],
            [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.25, 0.25, 0.5]],
            [0.3, 6.0, 2.0],
            [6.0, 0.3, 3.0],
        )
        canon = canonicalize(scrambled)
        share = canon.terror_share()
        assert (np.diff(share) <= 1e-12).all()
        assert canon.lambda_t[0] == 6.0 and canon.lambda_c[0] == 0.3

    def test_canonicalize_preserves_distribution(self):
        scrambled = make_params(
            [0.2, 0.8], [[0.6, 0.4], [0.1, 0.9]], [0.5, 4.0], [3.0, 0.2]
        )
        obs = ObservationSequence([2, 0, 1], [0, 3, 1])
        before = forward_backward(scrambled, obs).loglik
        after = forward_backward(canonicalize(scrambled), obs).loglik
        assert after == pytest.approx(before, rel=1e-12)

    def test_canonical_permutation_roundtrip(self):
        perm = canonical_permutation(TWO_STATE)
        assert sorted(perm.tolist()) == [0, 1]


class TestEmissions:
    def test_matches_pure_poisson_product(self):
        val = emission_loglik(TWO_STATE, 3, 1, 0)
        expected = math.log(oracles.poisson_pmf(3, 4.0) * oracles.poisson_pmf(1, 0.2))
        assert val == pytest.approx(expected, rel=1e-12)

    def test_zero_rate_convention(self):
        params = make_params([1.0], [[1.0]], [0.0], [2.0])
        assert emission_loglik(params, 0, 1, 0) == pytest.approx(math.log(oracles.poisson_pmf(1, 2.0)))
        assert emission_loglik(params, 1, 1, 0) == -math.inf


class TestForwardBackward:
    def test_against_enumeration_randomized(self):
        rng = np.random.default_rng(7)
        for trial in range(40):
            k = int(rng.integers(1, 4))
            T = int(rng.integers(1, 7))
            pi, trans, lt, lc, t, c = oracles.random_instance(rng, k, T)
            params = make_params(pi, trans, lt, lc)
            post = forward_backward(params, ObservationSequence(t, c))
            ll, gamma, xi = oracles.brute_force_posteriors(pi, trans, lt, lc, t, c)
            assert post.loglik == pytest.approx(ll, rel=1e-10, abs=1e-10)
            np.testing.assert_allclose(post.gamma, gamma, atol=1e-10)
            np.testing.assert_allclose(post.xi, xi, atol=1e-10)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(11)
        pi, trans, lt, lc, t, c = oracles.random_instance(rng, 3, 12)
        post = forward_backward(make_params(pi, trans, lt, lc), ObservationSequence(t, c))
        np.testing.assert_allclose(post.gamma.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(post.xi.sum(axis=(1, 2)), 1.0, atol=1e-12)

    def test_xi_marginalizes_to_gamma(self):
        rng = np.random.default_rng(13)
        pi, trans, lt, lc, t, c = oracles.random_instance(rng, 3, 9)
        post = forward_backward(make_params(pi, trans, lt, lc), ObservationSequence(t, c))
        np.testing.assert_allclose(post.xi.sum(axis=2), post.gamma[:-1], atol=1e-12)
        np.testing.assert_allclose(post.xi.sum(axis=1), post.gamma[1:], atol=1e-12)

    def test_large_counts_do_not_underflow(self):
        params = make_params([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [900.0, 1.0], [1.0, 900.0])
        t = [850, 900, 2, 1, 920]
        c = [1, 0, 880, 901, 3]
        post = forward_backward(params, ObservationSequence(t, c))
        assert math.isfinite(post.loglik)
        np.testing.assert_allclose(post.gamma.sum(axis=1), 1.0, atol=1e-10)

    def test_impossible_everywhere_names_step(self):
        params = make_params([1.0], [[1.0]], [0.0], [1.0])
        with pytest.raises(ImpossibleObservationError) as exc:
            forward_backward(params, ObservationSequence([0, 3], [1, 1]))
        assert exc.value.step == 1

    def test_impossible_given_history(self):
        # State 0 cannot emit c>0, state 1 cannot emit t>0, and the chain
        # starts in 0 and never leaves: step 1 has zero total probability.
        params = make_params([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [5.0, 0.0], [0.0, 5.0])
        with pytest.raises(ImpossibleObservationError) as exc:
            forward_backward(params, ObservationSequence([3, 0], [0, 4]))
        assert exc.value.step == 1


class TestViterbi:
    def test_against_enumeration_randomized(self):
        rng = np.random.default_rng(17)
        for trial in range(40):
            k = int(rng.integers(1, 4))
            T = int(rng.integers(1, 7))
            pi, trans, lt, lc, t, c = oracles.random_instance(rng, k, T)
            path, logp = viterbi(make_params(pi, trans, lt, lc), ObservationSequence(t, c))
            best, argmax = oracles.brute_force_viterbi(pi, trans, lt, lc, t, c)
            assert logp == pytest.approx(best, rel=1e-10, abs=1e-10)
            assert tuple(path.tolist()) in {tuple(p) for p in argmax}

    def test_symmetric_tie_takes_lowest_indices(self):
        params = make_params([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [2.0, 2.0], [2.0, 2.0])
        path, _ = viterbi(params, ObservationSequence([1, 2, 3], [1, 2, 3]))
        assert path.tolist() == [0, 0, 0]

    def test_path_probability_matches_joint(self):
        rng = np.random.default_rng(19)
        pi, trans, lt, lc, t, c = oracles.random_instance(rng, 3, 5)
        path, logp = viterbi(make_params(pi, trans, lt, lc), ObservationSequence(t, c))
        joint = oracles.joint_path_prob(pi, trans, lt, lc, path.tolist(), t, c)
        assert logp == pytest.approx(math.log(joint), rel=1e-10)

    def test_impossible_observation_raises(self):
        params = make_params([1.0], [[1.0]], [0.0], [1.0])
        with pytest.raises(ImpossibleObservationError):
            viterbi(params, ObservationSequence([2], [0]))


class TestBatchEstep:
    def test_matches_per_sequence_forward_backward(self):
        rng = np.random.default_rng(23)
        pi, trans, lt, lc, _, _ = oracles.random_instance(rng, 3, 8)
        params = make_params(pi, trans, lt, lc)
        t = rng.poisson(2.0, size=(5, 8))
        c = rng.poisson(1.0, size=(5, 8))
        ll, gamma, xi_sum = _batch_estep(params, t, c)
        want_ll = 0.0
        want_xi = np.zeros((3, 3))
        for i in range(5):
            post = forward_backward(params, ObservationSequence(t[i], c[i]))
            want_ll += post.loglik
            want_xi += post.xi.sum(axis=0)
            np.testing.assert_allclose(gamma[i], post.gamma, atol=1e-10)
        assert ll == pytest.approx(want_ll, rel=1e-12)
        np.testing.assert_allclose(xi_sum, want_xi, atol=1e-10)


class TestBaumWelch:
    def test_trace_monotone_nondecreasing(self):
        rng = np.random.default_rng(29)
        obs = [
            ObservationSequence(rng.poisson(3.0, 40), rng.poisson(0.5, 40))
            for _ in range(4)
        ]
        _, trace = baum_welch_fit(obs, k=2, n_restarts=2, seed=1)
        diffs = np.diff(np.asarray(trace))
        assert (diffs >= -1e-8 * np.maximum(1.0, np.abs(np.asarray(trace[:-1])))).all()

    def test_k1_closed_form_is_sample_mean(self):
        rng = np.random.default_rng(31)
        t = rng.poisson(2.5, size=60)
        c = rng.poisson(4.0, size=60)
        params, _ = baum_welch_fit(ObservationSequence(t, c), k=1)
        assert params.lambda_t[0] == pytest.approx(t.mean(), rel=1e-12)
        assert params.lambda_c[0] == pytest.approx(c.mean(), rel=1e-12)
        assert params.pi.tolist() == [1.0]
        assert params.trans.tolist() == [[1.0]]

    def test_same_seed_same_fit(self):
        rng = np.random.default_rng(37)
        obs = ObservationSequence(rng.poisson(2.0, 50), rng.poisson(2.0, 50))
        a, trace_a = baum_welch_fit(obs, k=2, seed=5, n_restarts=3)
        b, trace_b = baum_welch_fit(obs, k=2, seed=5, n_restarts=3)
        assert trace_a == trace_b
        np.testing.assert_array_equal(a.lambda_t, b.lambda_t)
        np.testing.assert_array_equal(a.trans, b.trans)

    def test_explicit_init_runs_single_start(self):
        rng = np.random.default_rng(41)
        obs = ObservationSequence(rng.poisson(4.0, 30), rng.poisson(1.0, 30))
        init = make_params([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [5.0, 1.0], [0.5, 2.0])
        params, trace = baum_welch_fit(obs, k=2, init=init, max_iter=1)
        assert len(trace) == 1
        params.validate()

    def test_recovers_well_separated_rates(self):
        true = make_params(
            [0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [6.0, 0.2], [0.2, 6.0]
        )
        rng = np.random.default_rng(43)
        T = 400
        states = np.empty(T, dtype=int)
        states[0] = 0
        for tau in range(1, T):
            states[tau] = rng.choice(2, p=true.trans[states[tau - 1]])
        t = rng.poisson(true.lambda_t[states])
        c = rng.poisson(true.lambda_c[states])
        params, _ = baum_welch_fit(ObservationSequence(t, c), k=2, seed=0, n_restarts=4)
        np.testing.assert_allclose(params.lambda_t, true.lambda_t, rtol=0.1, atol=0.08)
        np.testing.assert_allclose(params.lambda_c, true.lambda_c, rtol=0.1, atol=0.08)
        np.testing.assert_allclose(params.trans, true.trans, atol=0.05)

    def test_output_is_canonical(self):
        rng = np.random.default_rng(47)
        obs = ObservationSequence(rng.poisson(3.0, 80), rng.poisson(3.0, 80))
        params, _ = baum_welch_fit(obs, k=3, seed=2, n_restarts=2)
        share = params.terror_share()
        assert (np.diff(share) <= 1e-12).all()

    def test_rejects_empty_and_bad_k(self):
        with pytest.raises(ValueError):
            baum_welch_fit([], k=2)
        with pytest.raises(ValueError):
            baum_welch_fit(ObservationSequence([1], [1]), k=0)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_em_never_decreases_likelihood(self, seed):
        rng = np.random.default_rng(seed)
        obs = ObservationSequence(rng.poisson(1.5, 25), rng.poisson(2.5, 25))
        _, trace = baum_welch_fit(obs, k=2, n_restarts=1, seed=seed, max_iter=50)
        arr = np.asarray(trace)
        assert (np.diff(arr) >= -1e-8 * np.maximum(1.0, np.abs(arr[:-1]))).all()


class TestDecodePanel:
    def test_matches_per_cell_calls(self):
        rng = np.random.default_rng(53)
        panel = CountPanel(
            4, 2000, 2009,
            rng.poisson(2.0, (4, 10)).astype(np.int64),
            rng.poisson(2.0, (4, 10)).astype(np.int64),
        )
        field, gammas = decode_panel(TWO_STATE, panel)
        assert field.shape == (4, 10) and gammas.shape == (4, 10, 2)
        for cell in range(4):
            obs = ObservationSequence(panel.t[cell], panel.c[cell])
            path, _ = viterbi(TWO_STATE, obs)
            np.testing.assert_array_equal(field[cell], path)
            np.testing.assert_allclose(
                gammas[cell], forward_backward(TWO_STATE, obs).gamma, atol=1e-12
            )

    def test_cell_trans_changes_decoding(self):
        # A single mildly contradictory year: a near-absorbing chain smooths
        # over it, a memoryless chain follows the emission evidence.
        panel = CountPanel.zeros(2, 2000, 2004)
        panel.t[:, :] = [[4, 4, 1, 4, 4]] * 2
        panel.c[:, :] = [[0, 0, 1, 0, 0]] * 2
        sticky = np.array([[[0.999, 0.001], [0.001, 0.999]]] * 2)
        flippy = np.array([[[0.5, 0.5], [0.5, 0.5]]] * 2)
        f_sticky, _ = decode_panel(TWO_STATE, panel, cell_trans=sticky)
        f_flippy, _ = decode_panel(TWO_STATE, panel, cell_trans=flippy)
        assert f_sticky[0].tolist() == [0, 0, 0, 0, 0]
        assert f_flippy[0].tolist() == [0, 0, 1, 0, 0]


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(59)
        pi, trans, lt, lc, _, _ = oracles.random_instance(rng, 3, 1)
        params = make_params(pi, trans, lt, lc)
        path = tmp_path / "params.txt"
        write_params(params, path)
        back = read_params(path)
        assert back.pi.tolist() == params.pi.tolist()
        assert back.trans.tolist() == params.trans.tolist()
        assert back.lambda_t.tolist() == params.lambda_t.tolist()
        assert back.lambda_c.tolist() == params.lambda_c.tolist()

    def test_rejects_wrong_format_tag(self, tmp_path):
        path = tmp_path / "params.txt"
        path.write_text("some-other-format v9\nk 1\n")
        with pytest.raises(ValueError):
            read_params(path)
