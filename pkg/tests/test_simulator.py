import numpy as np
import pytest

from fgc.simulator import (
    ConvergenceTrace,
    LogisticProblem,
    LrSchedule,
    MlpProblem,
    QuadraticProblem,
    ThetaSchedule,
    TrainConfig,
    gradient_stats,
    make_problem,
    run,
    step,
    sub_gradient,
)


@pytest.fixture(scope="module")
def quad():
    return QuadraticProblem.synthesize(seed=0, n_examples=256, dim=20, noise=0.2)


@pytest.fixture(scope="module")
def logit():
    return LogisticProblem.synthesize(seed=1, n_examples=200, dim=12)


@pytest.fixture(scope="module")
def mlp():
    return MlpProblem.synthesize(seed=2, n_examples=128, in_dim=6, hidden=8)


def central_diff_batch_loss(problem, x, indices, h=1e-6):
    """Finite-difference gradient of the mini-batch loss (the oracle)."""

    def loss_at(point):
        if isinstance(problem, QuadraticProblem):
            residuals = problem.a[indices] @ point - problem.b[indices]
            return float(0.5 * np.mean(residuals**2))
        if isinstance(problem, LogisticProblem):
            margins = problem.y[indices] * (problem.a[indices] @ point)
            return float(
                np.mean(np.logaddexp(0.0, -margins))
                + 0.5 * problem.ridge * point @ point
            )
        preds, _ = problem._forward(point, problem.x_data[indices])
        return float(0.5 * np.mean((preds - problem.y_data[indices]) ** 2))

    grad = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    return grad


class TestSubGradient:
    def test_full_batch_matches_closed_form(self, quad):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(quad.dim)
        batch = np.arange(quad.n_examples)
        np.testing.assert_allclose(
            sub_gradient(quad, x, batch), quad.full_grad(x), rtol=1e-12, atol=1e-12
        )

    @pytest.mark.parametrize("problem_fixture", ["quad", "logit", "mlp"])
    def test_matches_finite_differences(self, problem_fixture, request):
        problem = request.getfixturevalue(problem_fixture)
        rng = np.random.default_rng(4)
        x = 0.5 * rng.standard_normal(problem.dim)
        indices = rng.integers(0, problem.n_examples, size=16)
        analytic = sub_gradient(problem, x, indices)
        numeric = central_diff_batch_loss(problem, x, indices)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)

    def test_whole_dataset_batch_has_no_sampling_variance(self, quad):
        x = np.zeros(quad.dim)
        batch = np.arange(quad.n_examples)
        first = sub_gradient(quad, x, batch)
        second = sub_gradient(quad, x, batch)
        np.testing.assert_array_equal(first, second)

    def test_empty_batch_rejected(self, quad):
        with pytest.raises(ValueError):
            sub_gradient(quad, np.zeros(quad.dim), [])

    def test_out_of_range_index_rejected(self, quad):
        with pytest.raises(ValueError):
            sub_gradient(quad, np.zeros(quad.dim), [quad.n_examples])


class TestStep:
    def test_zero_rate_is_identity(self):
        x = np.arange(4.0)
        np.testing.assert_array_equal(step(x, np.ones(4), 0.0), x)

    def test_literal_update(self):
        x_next = step(np.zeros(3), np.array([1.0, -2.0, 3.0]), 0.5)
        np.testing.assert_array_equal(x_next, [-0.5, 1.0, -1.5])

    def test_non_finite_update_rejected(self):
        with pytest.raises(FloatingPointError):
            step(np.zeros(2), np.array([np.inf, 0.0]), 1.0)

    def test_full_batch_descent_matches_closed_form_iterate(self, quad):
        # deterministic gradient descent: x_t = x* + (I - eta H)^t (x0 - x*)
        eta = 1.0 / quad.lipschitz
        hessian = quad.hessian
        x_star = np.linalg.solve(hessian, quad.a.T @ quad.b / quad.n_examples)
        batch = np.arange(quad.n_examples)
        x = np.zeros(quad.dim)
        contraction = np.eye(quad.dim) - eta * hessian
        grad_norms = []
        for t in range(30):
            closed_form = x_star + np.linalg.matrix_power(contraction, t) @ (-x_star)
            np.testing.assert_allclose(x, closed_form, rtol=1e-9, atol=1e-11)
            grad_norms.append(np.linalg.norm(quad.full_grad(x)))
            x = step(x, sub_gradient(quad, x, batch), eta)
        assert all(a > b for a, b in zip(grad_norms, grad_norms[1:]))


def baseline_config(problem, iterations=100, **overrides):
    defaults = dict(
        lr=LrSchedule(eta0=1.0 / (8.0 * problem.lipschitz)),
        theta=ThetaSchedule(kind="fixed", theta0=0.0),
        workers=4,
        batch_size=8,
        iterations=iterations,
        seed=7,
        channel="memory",
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestRunDeterminism:
    def test_identical_seeds_give_byte_identical_traces(self, quad):
        config = baseline_config(quad, theta=ThetaSchedule(kind="fixed", theta0=0.5))
        first = run(quad, config)
        second = run(quad, config)
        assert first.to_csv_bytes() == second.to_csv_bytes()

    def test_different_seeds_differ(self, quad):
        config = baseline_config(quad)
        other = baseline_config(quad, seed=8)
        assert run(quad, config).to_csv_bytes() != run(quad, other).to_csv_bytes()

    def test_wire_and_memory_channels_match_exactly(self, quad):
        for mode in ("count", "energy"):
            for quantizer in (None, __import__("fgc").quantizer.tune_eps(-8, 8, 8, 3)):
                wire = baseline_config(
                    quad, iterations=60, mode=mode, channel="wire",
                    theta=ThetaSchedule(kind="fixed", theta0=0.6), quantizer=quantizer,
                )
                memory = baseline_config(
                    quad, iterations=60, mode=mode, channel="memory",
                    theta=ThetaSchedule(kind="fixed", theta0=0.6), quantizer=quantizer,
                )
                assert run(quad, wire).to_csv_bytes() == run(quad, memory).to_csv_bytes()

    def test_baseline_equals_handrolled_plain_sgd(self, quad):
        # theta = 0 with passthrough quantizer must be plain SGD, bit for bit
        config = baseline_config(quad, iterations=80)
        trace = run(quad, config)

        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
        batches = rng.integers(0, quad.n_examples, size=(config.iterations, config.batch_size))
        sizes = np.array([len(s) for s in np.array_split(np.arange(config.batch_size), 4)])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        weights = sizes / config.batch_size
        x = quad.x0.copy()
        eta = config.lr.eta0
        losses = []
        for t in range(config.iterations):
            grads = quad.example_grads(batches[t], x)
            shards = np.add.reduceat(grads, offsets, axis=0)
            shards /= sizes[:, None].astype(np.float64)
            v_hat = weights @ shards
            losses.append(quad.loss(x))
            x = x - eta * v_hat
        np.testing.assert_array_equal(trace.loss, np.array(losses))


class TestRunBehaviour:
    def test_energy_mode_error_ratios_bounded_by_theta(self, quad):
        config = baseline_config(
            quad, iterations=200, mode="energy",
            theta=ThetaSchedule(kind="fixed", theta0=0.45),
        )
        trace = run(quad, config)
        assert (trace.err_ratio <= 0.45 + 1e-12).all()
        assert trace.err_ratio.max() > 0.0

    def test_count_mode_ratios_recorded_not_asserted(self, quad):
        config = baseline_config(
            quad, iterations=200, mode="count",
            theta=ThetaSchedule(kind="fixed", theta0=0.45),
        )
        trace = run(quad, config)
        assert np.isfinite(trace.err_ratio).all()
        assert (trace.err_ratio <= 1.0 + 1e-9).all()

    def test_fixed_theta_floor_grows_with_theta(self, quad):
        floors = []
        for theta in (0.0, 0.9):
            means = []
            for seed in range(3):
                config = baseline_config(
                    quad, iterations=3000, seed=seed, mode="count",
                    theta=ThetaSchedule(kind="fixed", theta0=theta),
                )
                trace = run(quad, config)
                means.append(trace.grad_sq_norm[-300:].mean())
            floors.append(np.mean(means))
        assert floors[1] > floors[0]

    def test_diminishing_schedule_converges(self):
        # near-isotropic problem so the 1/(1+t) family integrates enough
        problem = QuadraticProblem.synthesize(
            seed=5, n_examples=2048, dim=5, noise=0.01
        )
        config = TrainConfig(
            lr=LrSchedule(
                eta0=1.0 / problem.lipschitz, kind="diminishing", tau=1.0, power=1.0
            ),
            theta=ThetaSchedule(kind="diminishing"),
            workers=1,
            batch_size=16,
            iterations=10_000,
            seed=0,
            channel="memory",
            mode="count",
        )
        trace = run(problem, config)
        assert trace.grad_sq_norm.min() < 1e-4

    def test_mixed_schedule_switches_theta(self, quad):
        config = baseline_config(
            quad, iterations=40,
            theta=ThetaSchedule(kind="stepwise", theta0=0.9, theta1=0.0, switch_at=20),
        )
        trace = run(quad, config)
        assert (trace.theta[:20] == 0.9).all()
        assert (trace.theta[20:] == 0.0).all()
        assert (trace.err_ratio[20:] == 0.0).all()  # channel bypassed after switch

    def test_polynomial_schedule_decays(self, quad):
        config = baseline_config(
            quad, iterations=50,
            theta=ThetaSchedule(kind="polynomial", theta0=0.8, power=2.0),
        )
        trace = run(quad, config)
        assert trace.theta[0] == 0.8
        assert (np.diff(trace.theta) <= 0).all()
        assert trace.theta[-1] < 0.01

    def test_clipping_limits_transmitted_magnitudes(self, quad):
        config = baseline_config(quad, iterations=30, clip_c1=0.05)
        trace = run(quad, config)  # smoke: clip path executes and converges slower
        assert trace.iterations == 30

    def test_divergence_aborts_with_trace_prefix(self, quad):
        config = baseline_config(
            quad, iterations=5000,
            lr=LrSchedule(eta0=3.0 / quad.lipschitz),
        )
        trace = run(quad, config)
        assert trace.diverged
        assert trace.iterations < 5000
        assert trace.loss[-1] > 1e12 or not np.isfinite(trace.loss[-1])

    def test_one_step_descent_bound_holds_statistically(self):
        # one-step expected descent violation stays under
        # (L eta + theta^2) eta sigma^2 / (2 b) across 100 seeds
        problem = QuadraticProblem.synthesize(seed=6, n_examples=128, dim=10, noise=0.3)
        lipschitz = problem.lipschitz
        eta = 1.0 / (4.0 * lipschitz)
        theta = 0.4
        seed_means = []
        sigma_sq = None
        for seed in range(100):
            config = TrainConfig(
                lr=LrSchedule(eta0=eta),
                theta=ThetaSchedule(kind="fixed", theta0=theta),
                workers=1,
                batch_size=4,
                iterations=150,
                seed=seed,
                channel="memory",
                mode="energy",
                enforce_theorem_bounds=True,
            )
            trace = run(problem, config)
            sigma_sq = trace.meta["sigma_sq_at_x0"]
            violation = (
                trace.loss[1:] - trace.loss[:-1] + (eta / 4.0) * trace.grad_sq_norm[:-1]
            )
            seed_means.append(violation.mean())
        bound = (lipschitz * eta + theta**2) * eta * sigma_sq / (2.0 * 4)
        observed = np.mean(seed_means)
        stderr = np.std(seed_means) / np.sqrt(len(seed_means))
        assert observed <= bound + 3.0 * stderr

    def test_histograms_and_stats(self, quad):
        config = baseline_config(quad, iterations=2000, hist_interval=400)
        trace = run(quad, config)
        assert len(trace.histograms) == 5
        for hist in trace.histograms:
            assert hist.counts.sum() == pytest.approx(1.0)
        stats = gradient_stats(trace)
        assert stats.stddev_shrinks
        assert len(stats.samples) == 5

    def test_degenerate_constant_gradient_has_zero_stddev(self):
        problem = QuadraticProblem(a=np.zeros((16, 4)), b=np.zeros(16))
        config = TrainConfig(
            lr=LrSchedule(eta0=0.1),
            theta=ThetaSchedule(kind="fixed", theta0=0.0),
            workers=2,
            batch_size=4,
            iterations=20,
            seed=0,
            hist_interval=5,
        )
        trace = run(problem, config)
        assert all(h.std == 0.0 for h in trace.histograms)

    def test_gradient_stats_needs_two_histograms(self, quad):
        trace = run(quad, baseline_config(quad, iterations=10))
        with pytest.raises(ValueError):
            gradient_stats(trace)

    def test_sigma_estimated_once_and_recorded(self, quad):
        trace = run(quad, baseline_config(quad, iterations=5))
        assert trace.meta["sigma_sq_at_x0"] > 0
        assert "initial point" in trace.meta["sigma_sq_note"]

    def test_csv_columns(self, quad, tmp_path):
        trace = run(quad, baseline_config(quad, iterations=4))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "t,loss,grad_sq_norm,theta,eta,err_ratio"
        assert len(path.read_text().splitlines()) == 5


class TestValidation:
    def test_config_rejects_bad_shapes(self, quad):
        with pytest.raises(ValueError):
            baseline_config(quad, workers=0)
        with pytest.raises(ValueError):
            baseline_config(quad, workers=8, batch_size=4)
        with pytest.raises(ValueError):
            baseline_config(quad, mode="nope")
        with pytest.raises(ValueError):
            baseline_config(quad, channel="carrier-pigeon")
        with pytest.raises(ValueError):
            baseline_config(quad, clip_c1=-1.0)

    def test_theorem_bounds_enforced(self, quad):
        lipschitz = quad.lipschitz
        bad_lr = baseline_config(
            quad, lr=LrSchedule(eta0=1.0 / lipschitz), enforce_theorem_bounds=True
        )
        with pytest.raises(ValueError, match="1/\\(4L\\)"):
            run(quad, bad_lr)
        bad_theta = baseline_config(
            quad,
            lr=LrSchedule(eta0=1.0 / (8 * lipschitz)),
            theta=ThetaSchedule(kind="fixed", theta0=0.6),
            enforce_theorem_bounds=True,
        )
        with pytest.raises(ValueError, match="theta"):
            run(quad, bad_theta)
        bad_power = baseline_config(
            quad,
            lr=LrSchedule(eta0=1.0 / (8 * lipschitz), kind="diminishing", power=0.4),
            enforce_theorem_bounds=True,
        )
        with pytest.raises(ValueError, match="power"):
            run(quad, bad_power)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            LrSchedule(eta0=-0.1)
        with pytest.raises(ValueError):
            LrSchedule(eta0=0.1, kind="exotic")
        with pytest.raises(ValueError):
            ThetaSchedule(kind="fixed", theta0=1.5)
        with pytest.raises(ValueError):
            ThetaSchedule(kind="sigmoid")

    def test_make_problem(self):
        assert make_problem("quadratic", seed=0, dim=8).dim == 8
        assert make_problem("logistic", seed=0, dim=6).dim == 6
        assert make_problem("mlp", seed=0).name == "mlp"
        with pytest.raises(ValueError):
            make_problem("svm")

    def test_mlp_hidden_cap(self):
        with pytest.raises(ValueError):
            MlpProblem.synthesize(hidden=128)

    def test_lipschitz_estimates_flagged(self, quad, logit, mlp):
        assert not quad.lipschitz_is_estimate
        assert logit.lipschitz_is_estimate
        assert mlp.lipschitz_is_estimate


class TestMlpTraining:
    def test_short_run_reduces_loss(self, mlp):
        config = TrainConfig(
            lr=LrSchedule(eta0=0.2),
            theta=ThetaSchedule(kind="fixed", theta0=0.3),
            workers=2,
            batch_size=16,
            iterations=2000,
            seed=0,
            channel="memory",
            mode="count",
        )
        trace = run(mlp, config)
        assert trace.loss[-50:].mean() < 0.25 * trace.loss[:50].mean()
