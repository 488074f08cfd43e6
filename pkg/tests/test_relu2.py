"""Tests for the two-layer ReLU laboratory."""

import itertools
import math

import numpy as np
import pytest

from stablab.errors import InputError
from stablab.quadratic import coherence_matrix, coherence_summary
from stablab.relu2 import (
    Dataset,
    TwoLayerNet,
    build_cr_solution,
    build_memorizing_solution,
    cluster_sizes,
    effective_rank,
    forward,
    gauss_newton_family,
    generate_dataset,
    interpolation_residual,
    is_memorizing,
    mse_loss,
    per_sample_gradient,
    perturb_net,
    sam_gradient,
    train,
)

RNG = np.random.default_rng


def sign_dataset(rows):
    x = np.array(rows, dtype=np.float64)
    return Dataset(X=x, y=x[:, 0] * x[:, 1])


def distinct_dataset(n, d, seed):
    """Dataset with guaranteed-unique rows (memorization needs them)."""
    rng = RNG(seed)
    seen = set()
    rows = []
    while len(rows) < n:
        x = tuple((rng.integers(0, 2, d) * 2 - 1).tolist())
        if x not in seen:
            seen.add(x)
            rows.append(x)
    return sign_dataset(rows)


class TestGenerateDataset:
    def test_labels_follow_rule(self):
        ds = generate_dataset(200, 6, RNG(0))
        assert np.array_equal(ds.y, ds.X[:, 0] * ds.X[:, 1])
        assert set(np.unique(ds.X)) == {-1.0, 1.0}

    def test_rule_on_fixed_rows(self):
        ds = sign_dataset([[1, 1, 1], [1, -1, 1]])
        assert ds.y[0] == 1.0 and ds.y[1] == -1.0

    def test_label_mean_is_near_zero(self):
        n = 10_000
        ds = generate_dataset(n, 4, RNG(1))
        assert abs(float(ds.y.mean())) <= 3.0 / math.sqrt(n)

    def test_needs_two_coordinates(self):
        with pytest.raises(InputError):
            generate_dataset(5, 1, RNG(0))


class TestPatternCodingSolution:
    def test_matches_hand_table(self):
        net = build_cr_solution(3, 1.0, 5, 10)
        want_w1 = np.array([
            [1, 1, 1, 0, 0], [-1, 1, 1, 0, 0], [1, -1, 1, 0, 0],
            [-1, -1, 1, 0, 0], [1, 1, -1, 0, 0], [-1, 1, -1, 0, 0],
            [1, -1, -1, 0, 0], [-1, -1, -1, 0, 0],
            [0, 0, 0, 0, 0], [0, 0, 0, 0, 0],
        ], dtype=float)
        assert np.array_equal(net.W1, want_w1)
        assert np.array_equal(net.W2, [1, -1, -1, 1, 1, -1, -1, 1, 0, 0])
        # Bias -r(C-1): only the matching sign pattern clears zero.
        assert np.array_equal(net.b, [-2.0] * 8 + [0.0, 0.0])

    def test_single_activation_with_value_scale(self):
        net = build_cr_solution(3, 1.5, 6, 8)
        for bits in itertools.product([-1.0, 1.0], repeat=6):
            value, active = forward(net, np.array(bits))
            assert active.sum() == 1
            j = int(np.flatnonzero(active)[0])
            z = float(net.W1[j] @ np.array(bits) + net.b[j])
            assert z == pytest.approx(1.5, abs=1e-12)

    def test_interpolates_all_inputs_exhaustively(self):
        net = build_cr_solution(3, 1.0, 5, 10)
        for bits in itertools.product([-1.0, 1.0], repeat=5):
            x = np.array(bits)
            value, _ = forward(net, x)
            assert value == pytest.approx(x[0] * x[1], abs=1e-12)

    def test_width_must_hold_patterns(self):
        with pytest.raises(InputError):
            build_cr_solution(4, 1.0, 6, 15)

    def test_interpolation_residual_zero(self):
        ds = generate_dataset(50, 8, RNG(2))
        net = build_cr_solution(3, 9.0 ** 0.25, 8, 16)
        assert interpolation_residual(net, ds) <= 1e-9

    def test_doubled_output_weights_residual(self):
        ds = generate_dataset(30, 6, RNG(3))
        net = build_cr_solution(2, 1.0, 6, 8)
        doubled = TwoLayerNet(W1=net.W1, W2=2.0 * net.W2, b=net.b)
        assert interpolation_residual(doubled, ds) == pytest.approx(1.0)


class TestMemorizingSolution:
    def test_activation_pattern_is_identity(self):
        ds = sign_dataset([[1, 1, 1, 1], [1, -1, 1, -1], [-1, -1, 1, 1]])
        net = build_memorizing_solution(ds, 1.0)
        for i in range(ds.n):
            _, active = forward(net, ds.X[i])
            assert np.array_equal(np.flatnonzero(active), [i])

    def test_interpolates(self):
        ds = distinct_dataset(40, 9, 4)
        net = build_memorizing_solution(ds, 2.0)
        assert interpolation_residual(net, ds) <= 1e-9

    def test_coherence_is_diagonal(self):
        ds = distinct_dataset(25, 8, 5)
        net = build_memorizing_solution(ds, 1.0)
        s = coherence_matrix(gauss_newton_family(net, ds)).entries.entries
        off = s - np.diag(np.diag(s))
        assert np.max(np.abs(off)) <= 1e-10

    def test_is_memorizing_true(self):
        ds = distinct_dataset(15, 7, 6)
        net = build_memorizing_solution(ds, 0.7)
        assert is_memorizing(net, ds)

    def test_duplicates_rejected(self):
        ds = sign_dataset([[1, 1, 1], [1, 1, 1]])
        with pytest.raises(InputError):
            build_memorizing_solution(ds, 1.0)


class TestForwardAndMemorizationPredicate:
    def test_zero_net(self):
        net = TwoLayerNet(W1=np.zeros((4, 3)), W2=np.zeros(4), b=np.zeros(4))
        value, active = forward(net, np.array([1.0, -1.0, 1.0]))
        assert value == 0.0 and not active.any()

    def test_zero_net_not_memorizing(self):
        ds = generate_dataset(5, 3, RNG(7))
        net = TwoLayerNet(W1=np.zeros((5, 3)), W2=np.zeros(5), b=np.zeros(5))
        assert not is_memorizing(net, ds)

    def test_pattern_net_with_shared_units_not_memorizing(self):
        # More samples than patterns forces unit sharing by pigeonhole.
        ds = generate_dataset(100, 10, RNG(8))
        net = build_cr_solution(3, 1.0, 10, 8)
        assert not is_memorizing(net, ds)


class TestPerSampleGradient:
    def test_norm_identity_at_flattest_scale(self):
        d = 15
        r = (d + 1) ** 0.25
        net = build_cr_solution(3, r, d, 10)
        x = generate_dataset(1, d, RNG(9)).X[0]
        g = per_sample_gradient(net, x)
        assert float(g.flat @ g.flat) == pytest.approx(8.0, abs=1e-9)

    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0, 3.0])
    def test_norm_identity_general_scale(self, r):
        d = 11
        net = build_cr_solution(2, r, d, 4)
        x = generate_dataset(1, d, RNG(10)).X[0]
        g = per_sample_gradient(net, x)
        want = r * r + (d + 1) / (r * r)
        assert float(g.flat @ g.flat) == pytest.approx(want, abs=1e-9)

    def test_zero_net_zero_gradient(self):
        net = TwoLayerNet(W1=np.zeros((3, 4)), W2=np.zeros(3), b=np.zeros(3))
        g = per_sample_gradient(net, np.array([1.0, 1.0, -1.0, 1.0]))
        assert np.all(g.flat == 0.0)

    def test_block_layout(self):
        net = build_cr_solution(2, 1.0, 4, 4)
        x = np.array([1.0, -1.0, 1.0, 1.0])
        g = per_sample_gradient(net, x)
        assert g.flat.shape == (net.d2 * (net.d + 2),)
        _, active = forward(net, x)
        j = int(np.flatnonzero(active)[0])
        assert g.w2_block[j] == pytest.approx(1.0)     # ReLU output = r
        assert np.allclose(g.w1_block[j], net.W2[j] * x)
        assert g.b_block[j] == pytest.approx(net.W2[j])

    def test_matches_finite_differences(self):
        rng = RNG(11)
        d, d2 = 7, 10
        base = build_cr_solution(3, 1.2, d, d2)
        checked = 0
        while checked < 100:
            net = perturb_net(base, 0.3, rng)
            x = rng.integers(0, 2, d) * 2.0 - 1.0
            z = net.W1 @ x + net.b
            if np.min(np.abs(z)) < 1e-3:
                continue  # stencil would straddle an activation boundary
            flat = per_sample_gradient(net, x).flat
            fd = _finite_difference_gradient(net, x, h=1e-5)
            denom = np.maximum(np.abs(fd), 1.0)
            assert np.max(np.abs(flat - fd) / denom) < 1e-5
            checked += 1


def _finite_difference_gradient(net, x, h):
    d, d2 = net.d, net.d2

    def value(w1, w2, b):
        z = w1 @ x + b
        return float(w2 @ np.where(z > 0.0, z, 0.0))

    grads = []
    for block_name, shape in (("W2", (d2,)), ("W1", (d2, d)), ("b", (d2,))):
        block = getattr(net, block_name)
        flat_block = block.reshape(-1)
        out = np.zeros(flat_block.shape[0])
        for k in range(flat_block.shape[0]):
            bump = np.zeros_like(flat_block)
            bump[k] = h
            plus = {n: getattr(net, n).copy() for n in ("W1", "W2", "b")}
            minus = {n: getattr(net, n).copy() for n in ("W1", "W2", "b")}
            plus[block_name] = (flat_block + bump).reshape(shape)
            minus[block_name] = (flat_block - bump).reshape(shape)
            out[k] = (value(plus["W1"], plus["W2"], plus["b"])
                      - value(minus["W1"], minus["W2"], minus["b"])) / (2 * h)
        grads.append(out)
    return np.concatenate([grads[0], grads[1], grads[2]])


class TestGaussNewtonFamily:
    def test_coherence_entries_are_gradient_dots(self):
        ds = generate_dataset(12, 6, RNG(12))
        net = perturb_net(build_cr_solution(2, 1.0, 6, 6), 0.2, RNG(13))
        fam = gauss_newton_family(net, ds)
        s = coherence_matrix(fam).entries.entries
        grads = np.stack([per_sample_gradient(net, x).flat for x in ds.X])
        assert np.allclose(s, np.abs(grads @ grads.T), atol=1e-10)

    def test_duplicated_sample_gives_full_entry(self):
        d, r = 9, 1.3
        base = generate_dataset(6, d, RNG(14)).X
        x_dup = np.vstack([base, base[0]])
        ds = Dataset(X=x_dup, y=x_dup[:, 0] * x_dup[:, 1])
        net = build_cr_solution(3, r, d, 8)
        s = coherence_matrix(gauss_newton_family(net, ds)).entries.entries
        want = r * r + (d + 1) / (r * r)
        assert s[0, 6] == pytest.approx(want, rel=1e-9)

    def test_sam_flavor_dominates_plain(self):
        ds = generate_dataset(30, 10, RNG(15))
        net = build_cr_solution(3, (11.0) ** 0.25, 10, 8)
        fam = gauss_newton_family(net, ds)
        plain = coherence_summary(fam, 0.0).lambda_max_s
        for kappa in (0.05, 0.3, 1.0):
            assert coherence_summary(fam, kappa).lambda_max_s >= plain - 1e-9


class TestClusterSizes:
    def test_each_pattern_once(self):
        rows = []
        for bits in itertools.product([1.0, -1.0], repeat=2):
            rows.append(list(bits) + [1.0, 1.0])
        ds = sign_dataset(rows)
        net = build_cr_solution(2, 1.0, 4, 4)
        assert np.array_equal(sorted(cluster_sizes(net, ds)), [1, 1, 1, 1])

    def test_identical_samples_one_cluster(self):
        ds = sign_dataset([[1, 1, 1]] * 7)
        net = build_cr_solution(2, 1.0, 3, 4)
        counts = cluster_sizes(net, ds)
        assert sorted(counts) == [0, 0, 0, 7]

    def test_random_dataset_concentration(self):
        ds = generate_dataset(1000, 10, RNG(16))
        net = build_cr_solution(3, 1.0, 10, 8)
        counts = cluster_sizes(net, ds)
        assert counts.sum() == 1000
        assert 0.5 * 125 <= counts.max() <= 2.0 * 125


class TestEffectiveRank:
    def test_rank_one_features(self):
        v = np.linspace(-1.0, 1.0, 40)
        feats = np.outer(v, np.array([1.0, 2.0, -0.5]))
        assert effective_rank(feats, 0.9) == 1

    def test_isotropic_features(self):
        feats = RNG(17).standard_normal((5000, 50))
        assert abs(effective_rank(feats, 0.9) - 45) <= 2

    def test_constant_features(self):
        feats = np.ones((30, 8)) * 3.3
        assert effective_rank(feats, 0.9) == 0

    def test_threshold_validation(self):
        with pytest.raises(InputError):
            effective_rank(np.ones((5, 2)), 0.0)


class TestSamGradient:
    def test_rho_zero_is_plain_gradient(self):
        ds = generate_dataset(20, 6, RNG(18))
        net = perturb_net(build_cr_solution(2, 1.0, 6, 6), 0.1, RNG(19))
        batch = (ds.X[:10], ds.y[:10])
        base = sam_gradient(net, batch, 0.0)
        got = sam_gradient(net, batch, 0.0)
        assert np.array_equal(base, got)
        assert np.linalg.norm(base) > 0.0

    def test_zero_gradient_short_circuits(self):
        ds = generate_dataset(16, 8, RNG(20))
        net = build_cr_solution(3, 1.0, 8, 8)  # exact interpolation
        out = sam_gradient(net, (ds.X, ds.y), 0.5)
        assert np.all(out == 0.0)

    def test_first_order_expansion_with_gauss_newton(self):
        # Away from activation boundaries the SAM gradient equals
        # g + rho * H g / ||g|| to first order; with a tiny rho the
        # residual-Hessian mismatch of the Gauss-Newton H is negligible.
        rng = RNG(21)
        ds = generate_dataset(12, 9, RNG(22))
        net = perturb_net(build_cr_solution(3, 1.5, 9, 8), 1e-2, rng)
        batch = (ds.X, ds.y)
        rho = 1e-6
        g = sam_gradient(net, batch, 0.0)
        grads = np.stack([per_sample_gradient(net, x).flat for x in ds.X])
        gn_hessian = 2.0 * grads.T @ grads / ds.n
        want = g + rho * gn_hessian @ (g / np.linalg.norm(g))
        got = sam_gradient(net, batch, rho)
        assert np.linalg.norm(got - want) <= 1e-6 * np.linalg.norm(want)


class TestTrain:
    def test_zero_step_size_keeps_loss(self):
        ds = generate_dataset(30, 8, RNG(23))
        net = perturb_net(build_cr_solution(3, 1.0, 8, 10), 0.1, RNG(24))
        log = train(net, ds, "sgd", eta=0.0, batch_size=10, epochs=5, seed=0,
                    track_every=0)
        assert len(log.losses) == 6
        assert all(l == log.losses[0] for l in log.losses)

    def test_exact_solution_is_a_fixed_point(self):
        ds = generate_dataset(40, 10, RNG(25))
        net = build_cr_solution(3, (11.0) ** 0.25, 10, 8)
        for optimizer, rho in (("sgd", 0.0), ("sam", 0.05)):
            log = train(net, ds, optimizer, rho=rho, eta=0.01, batch_size=10,
                        epochs=5, seed=1, track_every=0)
            assert all(l <= 1e-12 for l in log.losses)

    def test_loss_decreases_from_perturbed_start(self):
        ds = generate_dataset(50, 10, RNG(26))
        net = perturb_net(build_cr_solution(3, (11.0) ** 0.25, 10, 8), 0.1,
                          RNG(27))
        log = train(net, ds, "sgd", eta=0.01, batch_size=10, epochs=30,
                    seed=2, track_every=0)
        assert log.losses[-1] < log.losses[0]
        assert not log.diverged

    def test_record_count_and_tracking_cadence(self):
        ds = generate_dataset(20, 6, RNG(28))
        net = perturb_net(build_cr_solution(2, 1.0, 6, 6), 0.1, RNG(29))
        log = train(net, ds, "sgd", eta=0.01, batch_size=5, epochs=8, seed=3,
                    track_every=3)
        assert len(log.losses) == 9 and len(log.metrics) == 9
        tracked = [i for i, m in enumerate(log.metrics) if m is not None]
        assert tracked == [0, 3, 6, 8]  # cadence plus the final epoch

    def test_seed_determinism(self):
        ds = generate_dataset(24, 7, RNG(30))
        net = perturb_net(build_cr_solution(2, 1.0, 7, 6), 0.1, RNG(31))
        a = train(net, ds, "sam", rho=0.01, eta=0.02, batch_size=6, epochs=6,
                  seed=11, track_every=0)
        b = train(net, ds, "sam", rho=0.01, eta=0.02, batch_size=6, epochs=6,
                  seed=11, track_every=0)
        assert a.losses == b.losses

    def test_divergence_flag(self):
        ds = generate_dataset(16, 6, RNG(32))
        net = perturb_net(build_cr_solution(2, 1.0, 6, 6), 0.5, RNG(33))
        log = train(net, ds, "sgd", eta=1e9, batch_size=4, epochs=30, seed=4,
                    track_every=0)
        assert log.diverged
        assert not math.isfinite(log.losses[-1])


class TestPerturbNet:
    def test_zero_noise_identity(self):
        net = build_cr_solution(2, 1.0, 5, 4)
        copy = perturb_net(net, 0.0, RNG(34))
        assert np.array_equal(copy.W1, net.W1)
        assert np.array_equal(copy.W2, net.W2)
        assert np.array_equal(copy.b, net.b)
        assert copy.W1 is not net.W1

    def test_original_unmodified(self):
        net = build_cr_solution(2, 1.0, 5, 4)
        w1_before = net.W1.copy()
        perturb_net(net, 0.5, RNG(35))
        assert np.array_equal(net.W1, w1_before)

    def test_noise_variance(self):
        net = TwoLayerNet(W1=np.zeros((100, 100)), W2=np.zeros(100),
                          b=np.zeros(100))
        noise_std = 0.1
        shifted = perturb_net(net, noise_std, RNG(36))
        deltas = np.concatenate([
            (shifted.W1 - net.W1).ravel(),
            shifted.W2 - net.W2,
            shifted.b - net.b,
        ])
        assert deltas.var() == pytest.approx(noise_std ** 2, rel=0.1)


class TestCurvatureLaws:
    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0, 3.0])
    def test_trace_law(self, r):
        d = 15
        ds = generate_dataset(20, d, RNG(37))
        net = build_cr_solution(3, r, d, 10)
        fam = gauss_newton_family(net, ds)
        want = r * r + (d + 1) / (r * r)
        traces = [np.trace(fam.member(i).entries) for i in range(5)]
        assert np.allclose(traces, want, atol=1e-9)

    def test_trace_minimized_at_quartic_root(self):
        d = 15
        best = (d + 1) ** 0.25
        grid = [0.5, 1.0, 1.5, best, 2.5, 3.0]
        values = [r * r + (d + 1) / (r * r) for r in grid]
        assert min(values) == values[grid.index(best)]

    def test_sharpness_law(self):
        d = 15
        r = (d + 1) ** 0.25
        ds = generate_dataset(30, d, RNG(38))
        net = build_cr_solution(3, r, d, 10)
        fam = gauss_newton_family(net, ds)
        assert float(np.max(fam.member_lambda_max())) == pytest.approx(
            2.0 * math.sqrt(d + 1), abs=1e-6
        )

    def test_mse_loss_value(self):
        ds = sign_dataset([[1, 1, 1], [1, -1, 1]])
        net = TwoLayerNet(W1=np.zeros((2, 3)), W2=np.zeros(2), b=np.zeros(2))
        # Zero net predicts 0 on labels +-1, so the MSE is 1.
        assert mse_loss(net, ds) == pytest.approx(1.0)
