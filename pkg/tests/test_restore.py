import numpy as np
import pytest

from semdeconv.core import Image2D, Kernel2D
from semdeconv.noise import NoiseParams
from semdeconv.restore import (
    IterationRecord,
    NlmConfig,
    SolverOptions,
    WeightField,
    compute_weights,
    convolve_circular,
    deconvolve_map,
    energy,
    energy_gradient,
    nlms_filter,
)

DELTA_NOISE = NoiseParams(sigma2=1.0, alpha=0.0)


# --- oracles -------------------------------------------------------------------

def convolve_bruteforce(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """O(n^2 k^2) nested-loop circular convolution."""
    h, w = img.shape
    k = taps.shape[0]
    c = k // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(k):
                for j in range(k):
                    oy, ox = i - c, j - c
                    acc += taps[i, j] * img[(y - oy) % h, (x - ox) % w]
            out[y, x] = acc
    return out


def energy_bruteforce(x, y, taps, weights: WeightField, lam: float) -> float:
    """Direct double-loop evaluation of the objective."""
    hx = convolve_bruteforce(x, taps)
    total = float(((y - hx) ** 2).sum())
    h, w = x.shape
    for iy in range(h):
        for ix in range(w):
            for (ny, nx), wgt in weights.neighbors(iy, ix):
                total += lam * wgt * (x[iy, ix] - x[ny, nx]) ** 2
    return total


def rand_kernel(rng, k):
    return Kernel2D.from_taps(rng.random((k, k)) + 0.05)


# --- convolution ---------------------------------------------------------------

def test_convolve_delta_identity():
    img = Image2D.from_array(np.random.default_rng(0).random((9, 7)))
    out = convolve_circular(img, Kernel2D.delta(2))
    np.testing.assert_allclose(out.data, img.data, atol=1e-13)


def test_convolve_preserves_constants():
    img = Image2D.from_array(np.full((8, 8), 3.25))
    out = convolve_circular(img, rand_kernel(np.random.default_rng(1), 5))
    np.testing.assert_allclose(out.data, 3.25, atol=1e-12)


def test_convolve_matches_bruteforce_8x8():
    rng = np.random.default_rng(2)
    img = Image2D.from_array(rng.random((8, 8)))
    kern = rand_kernel(rng, 3)
    out = convolve_circular(img, kern)
    np.testing.assert_allclose(out.data, convolve_bruteforce(img.data, kern.taps), atol=1e-12)


def test_convolve_random_cases_vs_oracle():
    rng = np.random.default_rng(3)
    for _ in range(25):
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        k = int(rng.integers(0, (min(h, w) - 1) // 2)) * 2 + 1
        img = Image2D.from_array(rng.normal(size=(h, w)))
        kern = rand_kernel(rng, k)
        out = convolve_circular(img, kern)
        np.testing.assert_allclose(out.data, convolve_bruteforce(img.data, kern.taps), atol=1e-10)


def test_convolve_kernel_too_large():
    with pytest.raises(ValueError, match="larger"):
        convolve_circular(Image2D.from_array(np.ones((4, 4))), Kernel2D.delta(3))


def test_convolve_adjoint_identity():
    # <H a, b> == <a, H~ b> with the point-reflected kernel
    rng = np.random.default_rng(4)
    a = Image2D.from_array(rng.normal(size=(8, 8)))
    b = Image2D.from_array(rng.normal(size=(8, 8)))
    kern = rand_kernel(rng, 5)
    reflected = Kernel2D(kern.taps[::-1, ::-1].copy())
    lhs = float(np.sum(convolve_circular(a, kern).data * b.data))
    rhs = float(np.sum(a.data * convolve_circular(b, reflected).data))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# --- weights -------------------------------------------------------------------

def test_constant_guide_all_weights_one():
    guide = Image2D.from_array(np.full((10, 10), 5.0))
    wf = compute_weights(guide, NlmConfig(patch_radius=1, search_radius=2))
    np.testing.assert_array_equal(wf.planes, 1.0)


def test_identical_distant_patches_weight_one():
    img = np.zeros((12, 12))
    img[2, 2] = img[2, 8] = 9.0  # identical neighborhoods six pixels apart
    wf = compute_weights(Image2D.from_array(img), NlmConfig(patch_radius=1, search_radius=6, h_filter=1.0))
    k = [i for i, (dy, dx) in enumerate(wf.offsets) if (dy, dx) == (0, 6)][0]
    assert wf.planes[k, 2, 2] == 1.0


def test_weights_monotone_in_h_filter():
    rng = np.random.default_rng(5)
    guide = Image2D.from_array(rng.random((10, 10)) * 10)
    w1 = compute_weights(guide, NlmConfig(patch_radius=1, search_radius=2, h_filter=2.0))
    w2 = compute_weights(guide, NlmConfig(patch_radius=1, search_radius=2, h_filter=4.0))
    assert np.all(w2.planes >= w1.planes)


def test_weights_in_unit_interval_and_self_is_window_max():
    rng = np.random.default_rng(6)
    guide = Image2D.from_array(rng.random((9, 9)) * 100)
    wf = compute_weights(guide, NlmConfig(patch_radius=1, search_radius=2, h_filter=3.0))
    assert wf.planes.min() > 0.0
    assert wf.planes.max() <= 1.0
    others = [k for k in range(len(wf.offsets)) if k != wf.self_index]
    np.testing.assert_array_equal(wf.planes[wf.self_index], wf.planes[others].max(axis=0))


def test_classic_weights_symmetric():
    rng = np.random.default_rng(7)
    guide = Image2D.from_array(rng.random((11, 13)) * 20)
    wf = compute_weights(guide, NlmConfig(patch_radius=2, search_radius=3, h_filter=5.0))
    h, w = guide.shape
    offs = {tuple(o): k for k, o in enumerate(map(tuple, wf.offsets))}
    for (dy, dx), k in list(offs.items())[::7]:
        kr = offs[(-dy, -dx)]
        rolled = np.roll(wf.planes[kr], (-dy, -dx), axis=(0, 1))
        np.testing.assert_allclose(wf.planes[k], rolled, rtol=0, atol=1e-12)


def test_noise_aware_weights_scale_with_noise_level():
    rng = np.random.default_rng(8)
    guide = Image2D.from_array(rng.random((10, 10)) * 10 + 50)
    quiet = NoiseParams(sigma2=1.0, alpha=0.0)
    loud = NoiseParams(sigma2=100.0, alpha=0.0)
    cfg = NlmConfig(patch_radius=1, search_radius=2, h_filter=3.0, weight_mode="noise-aware")
    w_quiet = compute_weights(guide, cfg, quiet)
    w_loud = compute_weights(guide, cfg, loud)
    # louder assumed noise -> distances shrink -> weights grow
    assert np.all(w_loud.planes >= w_quiet.planes - 1e-15)


def test_noise_aware_needs_params():
    with pytest.raises(ValueError, match="noise"):
        compute_weights(Image2D.from_array(np.ones((6, 6))),
                        NlmConfig(patch_radius=1, search_radius=1, weight_mode="noise-aware"))


def test_weightfield_neighbors_view():
    guide = Image2D.from_array(np.arange(36.0).reshape(6, 6))
    wf = compute_weights(guide, NlmConfig(patch_radius=1, search_radius=1))
    ns = wf.neighbors(0, 0)
    assert len(ns) == 9
    assert ((5, 5), wf.planes[0, 0, 0]) in [((ny, nx), w) for (ny, nx), w in ns]


# --- filtering -----------------------------------------------------------------

def test_nlms_constant_unchanged():
    img = Image2D.from_array(np.full((8, 8), 4.0))
    wf = compute_weights(img, NlmConfig(patch_radius=1, search_radius=2))
    np.testing.assert_allclose(nlms_filter(img, wf).data, 4.0, atol=0)


def test_nlms_self_only_identity():
    rng = np.random.default_rng(9)
    img = Image2D.from_array(rng.random((7, 7)))
    offsets = np.array([[0, 0]])
    planes = np.ones((1, 7, 7))
    wf = WeightField(offsets, planes, 0)
    np.testing.assert_array_equal(nlms_filter(img, wf).data, img.data)


def test_nlms_reduces_variance_on_noisy_constant():
    # 20 seeds, all must pass
    cfg = NlmConfig(patch_radius=1, search_radius=3, h_filter=50.0)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        img = Image2D.from_array(100.0 + rng.normal(0, 5, size=(16, 16)))
        wf = compute_weights(img, cfg)
        out = nlms_filter(img, wf)
        assert float(np.var(out.data)) < float(np.var(img.data))


def test_nlms_output_within_input_range():
    rng = np.random.default_rng(10)
    img = Image2D.from_array(rng.normal(0, 100, size=(12, 12)))
    wf = compute_weights(img, NlmConfig(patch_radius=1, search_radius=4, h_filter=1000.0))
    out = nlms_filter(img, wf)
    assert out.data.min() >= img.data.min()
    assert out.data.max() <= img.data.max()


# --- energy and gradient ----------------------------------------------------------

def _small_instance(seed, shape=(8, 8), k=3, lam=0.3, mode="classic"):
    rng = np.random.default_rng(seed)
    x = Image2D.from_array(rng.random(shape))
    y = Image2D.from_array(rng.random(shape))
    kern = rand_kernel(rng, k)
    cfg = NlmConfig(patch_radius=1, search_radius=2, h_filter=2.0, weight_mode=mode)
    noise = NoiseParams(sigma2=0.5, alpha=0.1) if mode == "noise-aware" else None
    wf = compute_weights(Image2D.from_array(rng.random(shape)), cfg, noise)
    return x, y, kern, wf, lam


def test_energy_zero_at_exact_fit_without_prior():
    rng = np.random.default_rng(11)
    x = Image2D.from_array(rng.random((8, 8)))
    kern = rand_kernel(rng, 3)
    y = convolve_circular(x, kern)
    wf = compute_weights(x, NlmConfig(patch_radius=1, search_radius=1))
    assert energy(x, y, kern, wf, 0.0) == pytest.approx(0.0, abs=1e-20)


def test_energy_regularizer_vanishes_on_constant():
    x = Image2D.from_array(np.full((6, 6), 2.0))
    y = Image2D.from_array(np.zeros((6, 6)))
    kern = Kernel2D.delta(1)
    wf = compute_weights(Image2D.from_array(np.random.default_rng(12).random((6, 6))),
                         NlmConfig(patch_radius=1, search_radius=2))
    with_prior = energy(x, y, kern, wf, 5.0)
    without = energy(x, y, kern, wf, 0.0)
    assert with_prior == pytest.approx(without, rel=1e-15)


def test_energy_matches_bruteforce_4x4():
    rng = np.random.default_rng(13)
    x = Image2D.from_array(rng.random((4, 4)))
    y = Image2D.from_array(rng.random((4, 4)))
    kern = rand_kernel(rng, 3)
    wf = compute_weights(Image2D.from_array(rng.random((4, 4))),
                         NlmConfig(patch_radius=1, search_radius=1, h_filter=1.5))
    lam = 0.7
    got = energy(x, y, kern, wf, lam)
    want = energy_bruteforce(x.data, y.data, kern.taps, wf, lam)
    assert got == pytest.approx(want, rel=1e-12)


def test_gradient_zero_at_minimizer():
    rng = np.random.default_rng(14)
    y = Image2D.from_array(rng.random((6, 6)))
    kern = Kernel2D.delta(1)
    wf = compute_weights(y, NlmConfig(patch_radius=1, search_radius=1))
    g = energy_gradient(y, y, kern, wf, 0.0)
    np.testing.assert_allclose(g.data, 0.0, atol=1e-14)


def test_gradient_of_constant_x_has_zero_prior_part():
    rng = np.random.default_rng(15)
    x = Image2D.from_array(np.full((6, 6), 3.0))
    kern = rand_kernel(rng, 3)
    y = convolve_circular(x, kern)  # zero data residual
    wf = compute_weights(Image2D.from_array(rng.random((6, 6))),
                         NlmConfig(patch_radius=1, search_radius=2))
    g = energy_gradient(x, y, kern, wf, 8.0)
    np.testing.assert_allclose(g.data, 0.0, atol=1e-12)


def finite_difference_gradient(x, y, kern, wf, lam, step=1e-5):
    base = x.data
    g = np.zeros_like(base)
    for iy in range(base.shape[0]):
        for ix in range(base.shape[1]):
            up = base.copy()
            dn = base.copy()
            up[iy, ix] += step
            dn[iy, ix] -= step
            g[iy, ix] = (
                energy(Image2D(up), y, kern, wf, lam) - energy(Image2D(dn), y, kern, wf, lam)
            ) / (2 * step)
    return g


@pytest.mark.parametrize("mode", ["classic", "noise-aware"])
def test_gradient_matches_finite_differences(mode):
    for seed in range(4):
        x, y, kern, wf, lam = _small_instance(100 + seed, mode=mode)
        g = energy_gradient(x, y, kern, wf, lam).data
        fd = finite_difference_gradient(x, y, kern, wf, lam)
        rel = np.abs(g - fd) / max(1.0, float(np.abs(fd).max()))
        assert rel.max() <= 1e-5


# --- deconvolution ----------------------------------------------------------------

def assert_monotone(log: list[IterationRecord]):
    energies = [r.energy for r in log]
    assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))


def test_deconvolve_identity_problem_returns_y():
    rng = np.random.default_rng(16)
    y = Image2D.from_array(rng.random((10, 10)) * 10)
    cfg = NlmConfig(patch_radius=1, search_radius=2)
    opts = SolverOptions(lambda_reg=0.0, max_iters=10, tol_rel=1e-9, init_mode="observed")
    out, log = deconvolve_map(y, Kernel2D.delta(1), cfg, None, opts)
    np.testing.assert_array_equal(out.data, y.data)
    assert log[-1].energy == 0.0
    assert_monotone(log)


def test_deconvolve_identity_problem_from_nlms_init():
    # one exact-step descent lands on y up to round-off; energy drops to ~0
    # after the first iteration
    rng = np.random.default_rng(16)
    y = Image2D.from_array(rng.random((10, 10)) * 10)
    cfg = NlmConfig(patch_radius=1, search_radius=2)
    opts = SolverOptions(lambda_reg=0.0, max_iters=10, tol_rel=1e-9, init_mode="nlms")
    out, log = deconvolve_map(y, Kernel2D.delta(1), cfg, None, opts)
    np.testing.assert_allclose(out.data, y.data, atol=1e-12)
    assert log[1].energy == pytest.approx(0.0, abs=1e-20)
    assert_monotone(log)


def test_deconvolve_recovers_noiseless_wellconditioned():
    rng = np.random.default_rng(17)
    x_true = Image2D.from_array(rng.random((16, 16)))
    taps = np.zeros((3, 3))
    taps[1, 1] = 0.6  # diagonally dominant, well conditioned
    taps[0, 1] = taps[2, 1] = taps[1, 0] = taps[1, 2] = 0.1
    kern = Kernel2D(taps)
    y = convolve_circular(x_true, kern)
    opts = SolverOptions(lambda_reg=0.0, max_iters=4000, tol_rel=1e-16, init_mode="observed")
    out, log = deconvolve_map(y, kern, NlmConfig(patch_radius=1, search_radius=1), None, opts)
    value_range = float(np.ptp(x_true.data))
    assert float(np.abs(out.data - x_true.data).max()) <= 1e-3 * value_range
    assert_monotone(log)


def test_deconvolve_monotone_under_strong_prior():
    rng = np.random.default_rng(18)
    y = Image2D.from_array(rng.random((12, 12)) * 50)
    kern = rand_kernel(rng, 3)
    noise = NoiseParams(sigma2=4.0, alpha=0.1, corr=np.array([0.5, 0.5]))
    cfg = NlmConfig(patch_radius=1, search_radius=2, h_filter=4.0, weight_mode="noise-aware")
    opts = SolverOptions(lambda_reg=5.0, max_iters=50, tol_rel=1e-10)
    out, log = deconvolve_map(y, kern, cfg, noise, opts)
    assert_monotone(log)
    assert len(log) >= 2
    assert all(np.isfinite(r.energy) for r in log)


def test_deconvolve_nlms_init_is_filtered_observation():
    rng = np.random.default_rng(19)
    y = Image2D.from_array(rng.random((8, 8)) * 10)
    cfg = NlmConfig(patch_radius=1, search_radius=2, h_filter=3.0)
    wf = compute_weights(y, cfg)
    x0 = nlms_filter(y, wf)
    opts = SolverOptions(lambda_reg=0.5, max_iters=1, tol_rel=1e-12, init_mode="nlms")
    _, log = deconvolve_map(y, Kernel2D.delta(1), cfg, None, opts)
    wf0 = compute_weights(x0, cfg)
    expected0 = energy(x0, y, Kernel2D.delta(1), wf0, 0.5)
    assert log[0].energy == pytest.approx(expected0, rel=1e-12)


def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(lambda_reg=-1.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iters=0)
    with pytest.raises(ValueError):
        SolverOptions(init_mode="zeros")
    with pytest.raises(ValueError):
        SolverOptions(step_policy="exact")


def test_nlm_config_validation():
    with pytest.raises(ValueError):
        NlmConfig(patch_radius=0)
    with pytest.raises(ValueError):
        NlmConfig(patch_radius=3, search_radius=2)
    with pytest.raises(ValueError):
        NlmConfig(h_filter=0.0)
    with pytest.raises(ValueError):
        NlmConfig(weight_mode="fancy")
