import numpy as np
import pytest

from latentvi import amortized, meanfield
from latentvi.amortized import Encoder
from latentvi.errors import DomainError, NumericalError
from latentvi.harness.data import gen_data
from latentvi.models import LinearGaussianModel, NonlinearGaussianModel, lg_log_marginal, lg_posterior
from latentvi.numkit import GaussianDense, GaussianDiag, RngStream, finite_diff_grad, kl_gaussian

from conftest import assert_rel, make_lg


def exact_encoder(model: LinearGaussianModel, theta):
    """Linear encoder whose output is the exact posterior (k = 1)."""
    p = model.unpack(theta)
    prec = np.eye(model.latent_dim) + p.W.T @ p.W / p.sigma2
    C = np.linalg.solve(prec, p.W.T / p.sigma2)
    enc = Encoder(model.data_dim, model.latent_dim, (), mode="diag")
    return enc, enc.set_linear(C, -C @ p.mu, np.log(np.diag(np.linalg.inv(prec))))


def nl_case(seed, mode="diag", k=1):
    r = RngStream(seed)
    model = NonlinearGaussianModel(2, k, (5,))
    enc = Encoder(2, k, (4,), mode=mode)
    theta = model.init_theta(r.spawn(0))
    phi = enc.init_phi(r.spawn(1)) + 0.1 * r.spawn(2).normal(enc.n_params)
    return model, enc, theta, phi, r.spawn(3).normal((3, 2))


class TestEncode:
    def test_zero_params_give_standard_normal(self):
        enc = Encoder(3, 2, (4,))
        q = amortized.encode(enc, np.zeros(enc.n_params), np.array([1.0, -2.0, 0.5]))
        assert isinstance(q, GaussianDiag)
        np.testing.assert_array_equal(q.mean, 0.0)
        np.testing.assert_array_equal(q.stddev, 1.0)

    def test_shared_parameters(self):
        enc = Encoder(3, 2, (4,), mode="full")
        phi = enc.init_phi(RngStream(1))
        x = np.array([0.1, 0.2, 0.3])
        a, b = amortized.encode(enc, phi, x), amortized.encode(enc, phi, x.copy())
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.cov, b.cov)

    def test_full_identity_factor_matches_diag_unit(self):
        x = np.array([0.4, -0.3])
        A, c = np.array([[0.5, 1.0]]).repeat(2, axis=0) * [[1.0], [-1.0]], np.array([0.1, 0.2])
        full = Encoder(2, 2, (), mode="full")
        diag = Encoder(2, 2, (), mode="diag")
        # packed tril (row-major): [log L00, L10, log L11]
        phi_f = full.set_linear(A, c, np.zeros(3))
        phi_d = diag.set_linear(A, c, np.zeros(2))
        qf, qd = amortized.encode(full, phi_f, x), amortized.encode(diag, phi_d, x)
        assert isinstance(qf, GaussianDense)
        np.testing.assert_allclose(qf.mean, qd.mean)
        np.testing.assert_allclose(qf.cov, np.eye(2))
        model = NonlinearGaussianModel(2, 2, (3,))
        theta = model.init_theta(RngStream(2))
        np.testing.assert_allclose(
            amortized.elbo_a_estimate(model, theta, full, phi_f, x, 16, RngStream(3)),
            amortized.elbo_a_estimate(model, theta, diag, phi_d, x, 16, RngStream(3)),
            rtol=1e-14,
        )

    def test_full_factor_off_diagonal(self):
        enc = Encoder(1, 2, (), mode="full")
        phi = enc.set_linear(np.zeros((2, 1)), np.zeros(2), [np.log(2.0), 0.5, np.log(3.0)])
        L = np.array([[2.0, 0.0], [0.5, 3.0]])
        np.testing.assert_allclose(amortized.encode(enc, phi, np.zeros(1)).cov, L @ L.T)

    def test_bad_mode(self):
        with pytest.raises(DomainError):
            Encoder(2, 1, mode="lowrank")


class TestElboA:
    def test_tight_at_exact_encoder(self, lg31):
        model, theta = lg31
        enc, phi = exact_encoder(model, theta)
        x = np.array([0.3, -1.0, 2.0])
        est, se = amortized.elbo_a_estimate(model, theta, enc, phi, x, 4096, RngStream(4), with_se=True)
        assert abs(est - lg_log_marginal(model, theta, x)) < 3 * se

    def test_bound_for_arbitrary_phi(self, rng):
        for i in range(10):
            r = rng.spawn(i)
            model, theta = make_lg(r, 3, 1)
            enc = Encoder(3, 1, (4,))
            phi = enc.init_phi(r.spawn(1))
            x = r.spawn(2).normal(3)
            est, se = amortized.elbo_a_estimate(model, theta, enc, phi, x, 256, r.spawn(3), with_se=True)
            assert est <= lg_log_marginal(model, theta, x) + 3 * se

    def test_decomposition_identity(self, rng):
        for i in range(10):
            r = rng.spawn(i)
            model, theta = make_lg(r, 3, 2)
            enc = Encoder(3, 2, (4,), mode="full")
            phi = enc.init_phi(r.spawn(1))
            x = r.spawn(2).normal(3)
            q = amortized.encode(enc, phi, x)
            post = lg_posterior(model, theta, x)
            lhs = meanfield.elbo_gaussian_q_lg(model, theta, q.mean, q.cov, x)
            rhs = lg_log_marginal(model, theta, x) - kl_gaussian(q.mean, q.cov, post.mean, post.cov)
            assert abs(lhs - rhs) < 1e-8

    def test_single_draw_reproducible(self, lg31):
        model, theta = lg31
        enc, phi = exact_encoder(model, theta)
        a = amortized.elbo_a_estimate(model, theta, enc, phi, np.ones(3), 1, RngStream(5))
        b = amortized.elbo_a_estimate(model, theta, enc, phi, np.ones(3), 1, RngStream(5))
        assert a == b


class TestGradJoint:
    @pytest.mark.parametrize("seed,mode,k", [(0, "diag", 1), (1, "full", 2), (2, "diag", 2), (3, "full", 1)])
    def test_crn_finite_differences(self, seed, mode, k):
        model, enc, theta, phi, X = nl_case(seed, mode, k)
        eps = RngStream(seed, 5).normal((X.shape[0], 6, k))
        _, gt, gp = amortized._joint_terms(model, theta, enc, phi, X, eps)
        assert_rel(gt, finite_diff_grad(lambda t: amortized._joint_terms(model, t, enc, phi, X, eps)[0].mean(), theta), 1e-4)
        assert_rel(gp, finite_diff_grad(lambda p: amortized._joint_terms(model, theta, enc, p, X, eps)[0].mean(), phi), 1e-4)

    def test_batch_is_mean_of_single_datum_gradients(self):
        model, enc, theta, phi, X = nl_case(4)
        eps = RngStream(6).normal((3, 4, 1))
        _, gt, gp = amortized._joint_terms(model, theta, enc, phi, X, eps)
        singles = [amortized._joint_terms(model, theta, enc, phi, X[i : i + 1], eps[i : i + 1]) for i in range(3)]
        np.testing.assert_allclose(gt, np.mean([s[1] for s in singles], axis=0), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(gp, np.mean([s[2] for s in singles], axis=0), rtol=1e-10, atol=1e-14)

    def test_empty_batch_rejected(self):
        model, enc, theta, phi, _ = nl_case(5)
        with pytest.raises(DomainError):
            amortized.grad_joint(model, theta, enc, phi, np.zeros((0, 2)), 2, RngStream(0))

    def test_pathwise_gradient_unbiased(self, lg31):
        model, theta = lg31
        enc = Encoder(3, 1, (), mode="diag")
        phi = enc.set_linear([[0.2, -0.1, 0.3]], [0.1], [-0.4])
        x = np.array([0.5, 1.0, -0.5])

        def analytic(p):
            q = amortized.encode(enc, p, x)
            return meanfield.elbo_gaussian_q_lg(model, theta, q.mean, q.cov, x)

        exact = finite_diff_grad(analytic, phi)
        reps = np.array([amortized.grad_joint(model, theta, enc, phi, x[None], 50, RngStream(7, i))[1] for i in range(400)])
        se = reps.std(axis=0, ddof=1) / np.sqrt(len(reps))
        assert np.all(np.abs(reps.mean(axis=0) - exact) <= 3 * se + 1e-7)

    def test_stationary_at_exact_encoder(self, lg31):
        model, theta = lg31
        enc, phi = exact_encoder(model, theta)
        x = np.array([0.3, -1.0, 2.0])
        reps = np.array([amortized.grad_joint(model, theta, enc, phi, x[None], 50, RngStream(8, i))[1] for i in range(400)])
        se = reps.std(axis=0, ddof=1) / np.sqrt(len(reps))
        assert np.all(np.abs(reps.mean(axis=0)) <= 3 * se + 1e-12)


class TestTrainVae:
    def _setup(self, seed=0):
        X, _ = gen_data("two_gaussians_2d", 200, seed)
        model = NonlinearGaussianModel(2, 1, (8,))
        enc = Encoder(2, 1, (8,))
        r = RngStream(seed)
        return model, enc, X, model.init_theta(r.spawn(0)), enc.init_phi(r.spawn(1))

    def test_zero_step_sizes_leave_parameters(self):
        model, enc, X, th, ph = self._setup()
        cfg = amortized.VaeConfig(epochs=2, step_theta=0.0, step_phi=0.0)
        st = amortized.train_vae(model, X, enc, th, ph, cfg, RngStream(1))
        np.testing.assert_array_equal(st.theta, th)
        np.testing.assert_array_equal(st.phi, ph)

    def test_bit_identical_replay(self):
        model, enc, X, th, ph = self._setup()
        cfg = amortized.VaeConfig(epochs=3)
        a = amortized.train_vae(model, X, enc, th, ph, cfg, RngStream(2))
        b = amortized.train_vae(model, X, enc, th, ph, cfg, RngStream(2))
        assert a.theta.tobytes() == b.theta.tobytes() and a.phi.tobytes() == b.phi.tobytes()

    def test_smoothed_trace_rises(self):
        model, enc, X, th, ph = self._setup()
        cfg = amortized.VaeConfig(epochs=60, batch_size=32)
        st = amortized.train_vae(model, X, enc, th, ph, cfg, RngStream(3))
        tr = np.array([t for _, t in st.trace])
        smooth = np.convolve(tr, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth[:20]) > 0)
        assert smooth[-1] > smooth[0]

    def test_non_finite_aborts_with_state(self):
        model, enc, X, th, ph = self._setup()
        bad = X.copy()
        bad[5, 0] = np.nan
        with pytest.raises(NumericalError) as info:
            amortized.train_vae(model, bad, enc, th, ph, amortized.VaeConfig(epochs=1), RngStream(4))
        assert set(info.value.state) == {"theta", "phi", "epoch"}


class TestGap:
    def test_exact_encoder_gap_within_noise(self, lg31):
        model, theta = lg31
        enc, phi = exact_encoder(model, theta)
        z = []
        for i in range(20):
            g = amortized.amortization_gap(model, theta, enc, phi, RngStream(9, i).normal(3), RngStream(10, i))
            z.append(g.gap / g.se)
        z = np.array(z)
        # "within 2 SE" is a 95% statement per point; 15 of 20 fails with probability < 1e-3
        assert np.sum(np.abs(z) < 2.0) >= 15
        assert np.all(z > -3.0)
        # mean of 20 roughly unit-variance z-scores
        assert abs(z.mean()) < 3.0 / np.sqrt(20)

    def test_perturbed_encoder_gap_positive(self, lg31):
        model, theta = lg31
        enc, phi = exact_encoder(model, theta)
        phi = phi + 0.5 * RngStream(11).normal(phi.size)
        g = amortized.amortization_gap(model, theta, enc, phi, np.array([0.3, -1.0, 2.0]), RngStream(12))
        assert g.gap > 2 * g.se
        assert g.budget == 500
