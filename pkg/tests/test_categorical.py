import numpy as np
import pytest

from guidegen import autodiff as ad
from guidegen import categorical as cat
from guidegen.schedules import (
    NoiseSchedule,
    alpha_bar_of,
    constant_beta_schedule,
    cosine_schedule,
)

LAYOUT = cat.ClassLayout(["organ_a", "organ_b"])  # 2 organs + tumor + background


def brute_posterior(k, c, t, sch, n):
    """Bayes by enumeration: q(x_t|x_{t-1}) q(x_{t-1}|x_0) / q(x_t|x_0)."""
    beta = sch.beta(t)
    bar_prev = alpha_bar_of(sch, t - 1)
    bar_t = alpha_bar_of(sch, t)
    num = np.array([
        ((1 - beta) * (j == k) + beta / n) * (bar_prev * (j == c) + (1 - bar_prev) / n)
        for j in range(n)
    ])
    return num / (bar_t * (k == c) + (1 - bar_t) / n)


# --- one_hot -----------------------------------------------------------------


def test_one_hot_basic():
    m = np.array([[[2]]])
    np.testing.assert_array_equal(cat.one_hot(m, 3).reshape(-1), [0, 1, 0])


def test_one_hot_argmax_inverse(rng):
    m = rng.integers(1, 7, size=(4, 4, 4))
    field = cat.one_hot(m, 6)
    np.testing.assert_array_equal(np.argmax(field, axis=0) + 1, m)
    np.testing.assert_allclose(field.sum(axis=0), 1.0)


# --- forward process ------------------------------------------------------------


def test_forward_step_substitution():
    out = cat.forward_step(np.array([1.0, 0.0]).reshape(2, 1, 1, 1), 0.2)
    np.testing.assert_allclose(out.reshape(-1), [0.9, 0.1], atol=1e-15)


def test_forward_step_beta_one_uniform(rng):
    x = rng.random((3, 2, 2, 2))
    x /= x.sum(axis=0)
    out = cat.forward_step(x, 1.0)
    np.testing.assert_allclose(out, 1.0 / 3, atol=1e-15)


def test_forward_step_beta_to_zero_identity(rng):
    x = rng.random((3, 2, 2, 2))
    x /= x.sum(axis=0)
    out = cat.forward_step(x, 1e-14)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_forward_step_rejects_bad_beta():
    x = np.full((2, 1, 1, 1), 0.5)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            cat.forward_step(x, bad)


def test_forward_marginal_near_identity():
    sch = NoiseSchedule(betas=np.array([1e-14]))
    m = np.array([[[2]]])
    out = cat.forward_marginal(m, 1, sch, 3)
    np.testing.assert_allclose(out.reshape(-1), [0, 1, 0], atol=1e-12)


def test_forward_marginal_near_uniform():
    sch = constant_beta_schedule(64, 0.9)
    m = np.array([[[1]]])
    out = cat.forward_marginal(m, 64, sch, 4)
    np.testing.assert_allclose(out.reshape(-1), 0.25, atol=1e-12)


def test_forward_marginal_half():
    sch = constant_beta_schedule(1, 0.5)  # alpha_bar_1 = 0.5
    out = cat.forward_marginal(np.array([[[3]]]), 1, sch, 4)
    np.testing.assert_allclose(out.reshape(-1), [0.125, 0.125, 0.625, 0.125], atol=1e-15)


def test_composition_property(rng):
    # iterated one-step corruption equals the closed-form marginal
    for _ in range(20):
        n = int(rng.integers(2, 9))
        T = int(rng.integers(1, 33))
        sch = NoiseSchedule(betas=rng.uniform(0.01, 0.7, size=T))
        m = rng.integers(1, n + 1, size=(3, 3, 3))
        x = cat.one_hot(m, n)
        for t in range(1, T + 1):
            x = cat.forward_step(x, sch.beta(t))
            np.testing.assert_allclose(x, cat.forward_marginal(m, t, sch, n), atol=1e-10)


# --- posterior ------------------------------------------------------------------


def test_posterior_spec_example():
    sch = constant_beta_schedule(2, 0.5)
    post = cat.posterior(np.array([[[1]]]), 2, 2, sch, 2)
    np.testing.assert_allclose(post.reshape(-1), [0.5, 0.5], atol=1e-15)


def test_posterior_degenerate_at_t1():
    sch = cosine_schedule(8)
    post = cat.posterior(np.array([[[3]]]), 2, 1, sch, 4)
    np.testing.assert_allclose(post.reshape(-1), [0, 1, 0, 0], atol=1e-15)


def test_posterior_uninformative_limit():
    # beta -> 1: x_t carries no information, posterior follows the prior leg
    sch = NoiseSchedule(betas=np.array([0.3, 1.0 - 1e-12]))
    n = 3
    bar_prev = alpha_bar_of(sch, 1)
    for k in (1, 2, 3):
        post = cat.posterior(np.array([[[k]]]), 2, 2, sch, n).reshape(-1)
        prior = np.array([bar_prev * (j == 1) + (1 - bar_prev) / n for j in range(n)])
        np.testing.assert_allclose(post, prior / prior.sum(), atol=1e-9)


def test_bayes_property_exhaustive():
    for n in (2, 3, 6):
        for T in (1, 5, 16):
            sch = cosine_schedule(T)
            for t in range(1, T + 1):
                stack = cat.posterior_stack(t, sch, n)
                for k in range(n):
                    for c in range(n):
                        ref = brute_posterior(k, c, t, sch, n)
                        np.testing.assert_allclose(stack[k, :, c], ref, atol=1e-12)


# --- mixture ------------------------------------------------------------------


def test_mixture_basis_vector():
    sch = cosine_schedule(8)
    n, t, c_star = 4, 5, 3
    x_t = np.array([[[2]]])
    f = cat.one_hot(np.array([[[c_star]]]), n)
    mix = cat.mixture(f, x_t, t, sch)
    expected = cat.posterior(x_t, c_star, t, sch, n)
    np.testing.assert_allclose(mix, expected, atol=1e-15)


def test_mixture_uniform_average():
    sch = constant_beta_schedule(4, 0.3)
    x_t = np.array([[[1]]])
    f = np.full((2, 1, 1, 1), 0.5)
    mix = cat.mixture(f, x_t, 3, sch).reshape(-1)
    cols = [cat.posterior(x_t, c, 3, sch, 2).reshape(-1) for c in (1, 2)]
    np.testing.assert_allclose(mix, (cols[0] + cols[1]) / 2, atol=1e-15)


def test_mixture_matches_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 5))
        T = int(rng.integers(2, 9))
        sch = cosine_schedule(T)
        t = int(rng.integers(2, T + 1))
        dims = (2, 2, 2)
        x_t = rng.integers(1, n + 1, size=dims)
        f = rng.random((n,) + dims)
        f /= f.sum(axis=0)
        mix = cat.mixture(f, x_t, t, sch)
        ref = np.zeros_like(mix)
        for c in range(1, n + 1):
            ref += f[c - 1] * cat.posterior(x_t, c, t, sch, n)
        np.testing.assert_allclose(mix, ref, atol=1e-12)


# --- loss ------------------------------------------------------------------


class OracleDenoiser:
    """Returns a fixed probability field regardless of input."""

    def __init__(self, field):
        self.field = field

    def __call__(self, x_t, t, prompt):
        return self.field


def test_loss_zero_for_perfect_denoiser(rng):
    # f returning the exact clean one-hot: KL term is 0 at every t >= 2
    n = 4
    m = rng.integers(1, n + 1, size=(3, 3, 3))
    sch = cosine_schedule(12)
    den = OracleDenoiser(cat.one_hot(m, n))
    for t in range(2, 13):
        marg = cat.forward_marginal(m, t, sch, n)
        x_t = cat.sample_categorical(marg, rng)
        target = cat._posterior_target(x_t, m, t, sch, n)
        mixed = cat.mixture(den.field, x_t, t, sch)
        kl = np.sum(target * (np.log(np.maximum(target, 1e-12))
                              - np.log(np.maximum(mixed, 1e-12))), axis=0)
        np.testing.assert_allclose(kl, 0.0, atol=1e-10)


def test_loss_uniform_denoiser_closed_form():
    # single voxel, N=2, fixed t: loss equals KL(pi_t(x0) || column average)
    n = 2
    sch = constant_beta_schedule(3, 0.4)
    m = np.array([[[1]]])
    t = 2

    class FixedRng:
        def integers(self, lo, hi, size=None):
            return t if size is None else np.full(size, t)

        def random(self, size=None):
            return np.zeros(size)  # forces x_t = first class with cdf sampling

    den = OracleDenoiser(np.full((n, 1, 1, 1), 0.5))
    loss = cat.loss_tcss([(m, None)], den, sch, FixedRng(), n_classes=n)
    x_t = np.array([[[1]]])
    target = cat.posterior(x_t, 1, t, sch, n).reshape(-1)
    avg = np.mean([cat.posterior(x_t, c, t, sch, n).reshape(-1) for c in (1, 2)], axis=0)
    expected = float(np.sum(target * (np.log(target) - np.log(avg))))
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)


def test_kl_nonnegative_random_pairs(rng):
    for _ in range(10_000):
        n = int(rng.integers(2, 6))
        p = rng.random(n) + 1e-6
        q = rng.random(n) + 1e-6
        p /= p.sum()
        q /= q.sum()
        kl = float(np.sum(p * (np.log(p) - np.log(q))))
        assert kl >= -1e-15
    p = rng.random(5) + 1e-6
    p /= p.sum()
    kl_same = float(np.sum(p * (np.log(p) - np.log(p))))
    assert abs(kl_same) < 1e-12


def test_loss_gradient_matches_finite_differences():
    # 2-voxel problem; denoiser parameterized by raw logits
    n = 3
    sch = constant_beta_schedule(4, 0.35)
    m = np.array([[[1, 3]]])
    logits = ad.Parameter("logits", np.random.default_rng(0).standard_normal((n, 1, 1, 2)))

    class LogitDenoiser:
        def __call__(self, x_t, t, prompt):
            return ad.softmax(logits.value, axis=0)

    def eval_loss():
        rng = np.random.default_rng(42)
        return cat.loss_tcss([(m, None)], LogitDenoiser(), sch, rng, n_classes=n)

    logits.reset_grad()
    with ad.Tape() as tape:
        loss = eval_loss()
    tape.backward(loss)

    h = 1e-5
    worst = 0.0
    flat = logits.value.data.reshape(-1)
    grad = logits.grad.reshape(-1)
    for e in range(flat.size):
        orig = flat[e]
        flat[e] = orig + h
        up = float(eval_loss().data)
        flat[e] = orig - h
        dn = float(eval_loss().data)
        flat[e] = orig
        numeric = (up - dn) / (2 * h)
        worst = max(worst, abs(grad[e] - numeric) / max(1e-8, abs(numeric)))
    assert worst < 1e-3


# --- sampling ------------------------------------------------------------------


class IdentityStub:
    """Returns its input renormalized."""

    def __call__(self, x_t, t, prompt):
        x = np.asarray(x_t, dtype=float) + 1e-9
        return x / x.sum(axis=0)


def test_sampler_states_stay_valid():
    sch = cosine_schedule(16)
    seen = []

    class CheckingStub(IdentityStub):
        def __call__(self, x_t, t, prompt):
            out = super().__call__(x_t, t, prompt)
            seen.append(out)
            return out

    field = cat.sample_tcss(CheckingStub(), None, sch, np.random.default_rng(0),
                            (4, 4, 4), 4)
    assert len(seen) == 16
    for s in seen + [field]:
        assert s.min() >= 0
        np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-9)


def test_sampler_deterministic():
    sch = cosine_schedule(8)
    a = cat.sample_tcss(IdentityStub(), None, sch, np.random.default_rng(5), (4, 4, 4), 3)
    b = cat.sample_tcss(IdentityStub(), None, sch, np.random.default_rng(5), (4, 4, 4), 3)
    np.testing.assert_array_equal(a, b)


def test_sampler_constant_oracle_recovers_class():
    n, c_star = 4, 2
    sch = cosine_schedule(16)
    target = cat.one_hot(np.full((3, 3, 3), c_star, dtype=np.int64), n)
    field = cat.sample_tcss(OracleDenoiser(target), None, sch,
                            np.random.default_rng(1), (3, 3, 3), n)
    assert np.all(np.argmax(field, axis=0) + 1 == c_star)


# --- mask retrieval ------------------------------------------------------------


def test_retrieve_masks_tumor_wins_overall_argmax():
    # organ 0.3, tumor 0.5, background 0.2 -> organ map keeps the organ,
    # tumor mask fires
    field = np.zeros((4, 1, 1, 1))
    field[0] = 0.3  # organ_a
    field[2] = 0.5  # tumor
    field[3] = 0.2  # background
    m_a, m_t = cat.retrieve_masks(field, LAYOUT)
    assert m_a.reshape(-1)[0] == 1
    assert m_t.reshape(-1)[0] == 1


def test_retrieve_masks_no_tumor():
    rng = np.random.default_rng(2)
    field = rng.random((4, 3, 3, 3))
    field[2] = 0.0  # tumor channel empty
    m_a, m_t = cat.retrieve_masks(field, LAYOUT)
    assert m_t.sum() == 0
    np.testing.assert_array_equal(m_a, np.argmax(field, axis=0) + 1)


def test_retrieve_masks_tie_breaks_low_index():
    field = np.zeros((4, 1, 1, 1))
    field[2] = 1.0  # exact one-hot tumor; remaining channels all tie at 0
    m_a, m_t = cat.retrieve_masks(field, LAYOUT)
    assert m_t.reshape(-1)[0] == 1
    assert m_a.reshape(-1)[0] == 1  # lowest class index among {1, 2, 4}


def test_retrieve_masks_rescale_invariant(rng):
    field = rng.random((4, 4, 4, 4))
    scale = rng.uniform(0.1, 10.0, size=(4, 4, 4))
    m_a1, m_t1 = cat.retrieve_masks(field, LAYOUT)
    m_a2, m_t2 = cat.retrieve_masks(field * scale, LAYOUT)
    np.testing.assert_array_equal(m_a1, m_a2)
    np.testing.assert_array_equal(m_t1, m_t2)
