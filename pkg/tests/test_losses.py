import numpy as np
import pytest

from polardewarp.geometry import ContourSet, EdgeLengths, augment_grid, edge_lengths, regular_lattice
from polardewarp.losses import (
    LossWeights,
    diff_loss,
    doc_iou_discrete,
    edge_loss,
    focal_wrap,
    global_iou_loss,
    gradient_check,
    grid_edge_loss,
    local_iou_loss,
    polar_iou_integral,
    shape3d_loss,
    smooth_l1,
    total_loss,
)


def _star_radii(rng, n):
    """Smooth positive periodic radius function sampled at n equal angles."""
    theta = np.arange(n) * 2 * np.pi / n
    r = 0.6 * np.ones(n)
    for m in range(1, 4):
        r += rng.uniform(-0.08, 0.08) * np.cos(m * theta + rng.uniform(0, 2 * np.pi))
    return r


def _star_fn(rng):
    coef = [(rng.uniform(-0.08, 0.08), rng.uniform(0, 2 * np.pi)) for _ in range(3)]

    def fn(theta):
        r = 0.6 * np.ones_like(theta)
        for m, (a, phi) in enumerate(coef, start=1):
            r += a * np.cos(m * theta + phi)
        return r

    return fn


class TestPolarIouIntegral:
    def test_identity(self):
        rng = np.random.default_rng(0)
        rho = _star_radii(rng, 64)
        assert polar_iou_integral(rho, rho) == 1.0

    def test_constant_ratio_gives_r_squared(self):
        rng = np.random.default_rng(1)
        rho_star = _star_radii(rng, 128)
        for r in (0.3, 0.8, 1.0):
            assert np.isclose(polar_iou_integral(r * rho_star, rho_star), r**2, atol=1e-12)

    def test_matches_fine_quadrature_oracle(self):
        rng = np.random.default_rng(2)
        f, g = _star_fn(rng), _star_fn(rng)
        coarse = np.arange(720) * 2 * np.pi / 720
        fine = np.arange(100_000) * 2 * np.pi / 100_000
        value = polar_iou_integral(f(coarse), g(coarse))
        oracle = np.square(np.minimum(f(fine), g(fine))).sum() / np.square(
            np.maximum(f(fine), g(fine))
        ).sum()
        assert abs(value - oracle) < 1e-3

    def test_rejects_nonpositive_and_short(self):
        with pytest.raises(ValueError):
            polar_iou_integral(np.array([1.0] * 8), np.array([1.0] * 7 + [0.0]))
        with pytest.raises(ValueError):
            polar_iou_integral(np.ones(4), np.ones(4))


class TestDocIouDiscrete:
    def test_examples(self):
        assert doc_iou_discrete([1, 1, 1, 1], [2, 2, 2, 2]) == 0.5
        assert doc_iou_discrete([1, 3], [2, 2]) == 0.6

    def test_constant_ratio_is_linear(self):
        rng = np.random.default_rng(3)
        rho_star = _star_radii(rng, 64)
        for r in (0.25, 0.7, 1.0):
            assert abs(doc_iou_discrete(r * rho_star, rho_star) - r) < 1e-12

    def test_quadratic_vs_linear_gap(self):
        # the discrete overlap is linear in a constant ratio, the sector
        # integral quadratic: both exact on the same inputs
        rng = np.random.default_rng(4)
        rho_star = _star_radii(rng, 720)
        r = 0.6
        assert abs(doc_iou_discrete(r * rho_star, rho_star) - r) < 1e-12
        assert abs(polar_iou_integral(r * rho_star, rho_star) - r * r) < 1e-12

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = np.abs(rng.normal(1, 0.3, size=17)) + 0.05
            b = np.abs(rng.normal(1, 0.3, size=17)) + 0.05
            v = doc_iou_discrete(a, b)
            assert 0 < v <= 1
            assert v == doc_iou_discrete(b, a)
        assert doc_iou_discrete(a, a) == 1.0

    def test_unit_iff_identical(self):
        a = np.array([1.0, 2.0, 3.0])
        b = a.copy()
        b[1] += 1e-9
        assert doc_iou_discrete(a, b) < 1.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            doc_iou_discrete([1.0, 0.0], [1.0, 1.0])


class TestGlobalIouLoss:
    def test_equal_arrays(self):
        rho = np.array([1.0, 2.0, 0.5])
        value, grad = global_iou_loss(rho, rho.copy())
        assert value == 0.0
        # tie rule: every coordinate sits on the min branch
        assert np.allclose(grad, -1.0 / rho.sum())

    def test_half_ratio(self):
        value, _ = global_iou_loss(np.ones(4), np.full(4, 2.0))
        assert np.isclose(value, np.log(2.0))

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(6)
        rho = np.abs(rng.normal(1, 0.2, size=100)) + 0.1
        rho_star = np.abs(rng.normal(1, 0.2, size=100)) + 0.1
        err = gradient_check(lambda r: global_iou_loss(r, rho_star), rho, 1e-6)
        assert err < 1e-4

    def test_nonnegative_zero_iff_equal(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = np.abs(rng.normal(1, 0.3, size=9)) + 0.05
            b = np.abs(rng.normal(1, 0.3, size=9)) + 0.05
            assert global_iou_loss(a, b)[0] > 0
        assert global_iou_loss(a, a.copy())[0] == 0.0


def _random_grid(rng, h=5, w=5, scale=0.04):
    return augment_grid(regular_lattice(h, w) + rng.normal(0, scale, size=(h, w, 2)))


class TestLocalIouLoss:
    def test_zero_on_equal(self):
        grid = _random_grid(np.random.default_rng(8))
        value, grad = local_iou_loss(grid, grid)
        assert value == 0.0

    def test_translation_invariance_exact(self):
        rng = np.random.default_rng(9)
        grid = _random_grid(rng)
        shifted = augment_grid(grid.xy + np.array([0.173, -0.411]))
        value, _ = local_iou_loss(shifted, grid)
        assert abs(value) < 1e-12

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(10)
        grid = _random_grid(rng)
        gt = _random_grid(rng)
        err = gradient_check(
            lambda f: local_iou_loss(augment_grid(f.reshape(5, 5, 2)), gt),
            grid.xy.reshape(-1),
            1e-6,
        )
        assert err < 1e-4

    def test_shape_mismatch(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            local_iou_loss(_random_grid(rng, 5, 5), _random_grid(rng, 5, 6))


class TestEdgeLoss:
    def test_identical(self):
        e = EdgeLengths(1.0, 1.0, 1.0, 1.0)
        value, grad = edge_loss(e, e)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_quarter_offsets(self):
        value, _ = edge_loss(EdgeLengths(1, 1, 1, 1), EdgeLengths(1.25, 1.25, 1.25, 1.25))
        assert np.isclose(value, 1.0)

    def test_matches_edge_lengths_recomputation(self):
        rng = np.random.default_rng(12)
        a, b = _random_grid(rng), _random_grid(rng)
        value, _ = grid_edge_loss(a, b)
        ea, eb = edge_lengths(a).as_array(), edge_lengths(b).as_array()
        assert np.isclose(value, np.abs(ea - eb).sum())

    def test_grid_gradient_against_finite_differences(self):
        rng = np.random.default_rng(13)
        a, b = _random_grid(rng), _random_grid(rng)
        err = gradient_check(
            lambda f: grid_edge_loss(augment_grid(f.reshape(5, 5, 2)), b),
            a.xy.reshape(-1),
            1e-6,
        )
        assert err < 1e-4


class TestFocalWrap:
    def test_perfect_iou_is_zero(self):
        assert focal_wrap(0.0, 1.0, 2.0, "iou-focal") == 0.0
        assert focal_wrap(0.0, 1.0, 2.0, "literal") == 0.0

    def test_iou_focal_value(self):
        value = focal_wrap(np.log(2.0), 0.5, 2.0, "iou-focal")
        assert np.isclose(value, 0.25 * np.log(2.0))

    def test_literal_value(self):
        ell = np.log(2.0)
        value = focal_wrap(ell, np.exp(-ell), 2.0, "literal")
        assert np.isclose(value, (1 - ell) ** 2 * ell)
        assert np.isclose(value, 0.0653, atol=5e-4)

    def test_modulation_monotone_in_iou(self):
        ious = np.linspace(0.05, 1.0, 40)
        factors = (1 - ious) ** 2.0
        assert np.all(np.diff(factors) < 1e-12)

    def test_rejects_bad_iou(self):
        with pytest.raises(ValueError):
            focal_wrap(0.1, 0.0, 2.0)


class TestSmoothL1:
    def test_half_unit_residual(self):
        pred = np.full((3, 4), 0.5)
        value, grad = smooth_l1(pred, np.zeros((3, 4)))
        assert np.isclose(value, 0.125)
        assert np.allclose(grad, 0.5 / 12)

    def test_large_residual_linear(self):
        value, grad = smooth_l1(np.full(5, 2.0), np.zeros(5))
        assert np.isclose(value, 1.5)
        assert np.allclose(grad, 1.0 / 5)

    def test_theta_wrap(self):
        pred = np.zeros((1, 1, 4))
        gt = np.zeros((1, 1, 4))
        pred[0, 0, 2] = 0.1
        gt[0, 0, 2] = 2 * np.pi - 0.1
        value, _ = smooth_l1(pred, gt, channels=("theta",))
        assert np.isclose(value, 0.5 * 0.2**2)

    def test_channel_subset(self):
        rng = np.random.default_rng(14)
        pred = rng.normal(size=(3, 3, 4))
        gt = rng.normal(size=(3, 3, 4))
        value, grad = smooth_l1(pred, gt, channels=("x", "y"))
        assert np.all(grad[..., 2:] == 0.0)
        ref, _ = smooth_l1(pred[..., :2], gt[..., :2])
        assert np.isclose(value, ref)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            smooth_l1(np.zeros(3), np.zeros(4))


class TestDiffLoss:
    def test_zero_on_equal(self):
        grid = _random_grid(np.random.default_rng(15))
        assert diff_loss(grid, grid)[0] == 0.0

    def test_translation_invariance_exact(self):
        rng = np.random.default_rng(16)
        grid = _random_grid(rng)
        shifted = augment_grid(grid.xy + np.array([0.3, 0.52]))
        assert abs(diff_loss(shifted, grid)[0]) < 1e-12

    def _delta_oracle(self, xy, k):
        """Direct enumeration of per-point neighbor-offset sums."""
        h, w = xy.shape[:2]
        if k == 4:
            offs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
        else:
            offs = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
        delta = np.zeros_like(xy)
        for i in range(h):
            for j in range(w):
                for di, dj in offs:
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        delta[i, j] += xy[ii, jj] - xy[i, j]
        return delta

    @pytest.mark.parametrize("k", [4, 8])
    def test_single_point_displacement_matches_enumeration(self, k):
        base = regular_lattice(5, 5)
        moved = base.copy()
        eps = 3e-3
        moved[2, 2, 0] += eps
        value, _ = diff_loss(augment_grid(moved), augment_grid(base), k=k)
        dp = self._delta_oracle(moved, k)
        dq = self._delta_oracle(base, k)
        expected = np.mean(np.hypot(*(dp - dq).transpose(2, 0, 1)))
        assert np.isclose(value, expected, atol=1e-15)

    @pytest.mark.parametrize("k", [4, 8])
    def test_random_grids_match_enumeration(self, k):
        rng = np.random.default_rng(17)
        a = regular_lattice(4, 6) + rng.normal(0, 0.03, (4, 6, 2))
        b = regular_lattice(4, 6) + rng.normal(0, 0.03, (4, 6, 2))
        value, _ = diff_loss(augment_grid(a), augment_grid(b), k=k)
        d = self._delta_oracle(a, k) - self._delta_oracle(b, k)
        assert np.isclose(value, np.mean(np.hypot(d[..., 0], d[..., 1])), atol=1e-14)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(18)
        gt = _random_grid(rng)
        start = _random_grid(rng)
        err = gradient_check(
            lambda f: diff_loss(augment_grid(f.reshape(5, 5, 2)), gt, k=8),
            start.xy.reshape(-1),
            1e-6,
        )
        assert err < 1e-4


class TestShape3dLoss:
    def test_identical(self):
        c = np.random.default_rng(19).normal(size=(4, 4, 3))
        assert shape3d_loss(c, c)[0] == 0.0

    def test_constant_offset(self):
        c = np.zeros((4, 4, 3))
        value, _ = shape3d_loss(c + 0.3, c)
        assert np.isclose(value, 0.3)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(20)
        a, b = rng.normal(size=(5, 6, 3)), rng.normal(size=(5, 6, 3))
        value, grad = shape3d_loss(a, b)
        assert np.isclose(value, np.abs(a - b).mean())
        assert np.allclose(grad, np.sign(a - b) / a.size)


class TestTotalLoss:
    def _instance(self, seed, h=5, w=5, b=16):
        rng = np.random.default_rng(seed)
        gt = _random_grid(rng, h, w)
        pred = _random_grid(rng, h, w)
        gt_c = ContourSet(radii=np.abs(rng.normal(0.5, 0.05, (1, b))) + 0.1, origin=gt.origin)
        pred_c = ContourSet(radii=np.abs(rng.normal(0.5, 0.05, (1, b))) + 0.1, origin=pred.origin)
        f_gt = rng.normal(size=(4, 4, 3))
        f_pred = f_gt + rng.normal(0, 0.2, size=(4, 4, 3))
        return pred, gt, pred_c, gt_c, f_pred, f_gt

    def test_zero_at_ground_truth(self):
        _, gt, _, gt_c, _, f_gt = self._instance(21)
        bd = total_loss(gt, gt, pred_contours=gt_c, gt_contours=gt_c,
                        pred_shape3d=f_gt, gt_shape3d=f_gt)
        for term in ("sl1", "diff", "global_iou", "lrtb", "local_iou", "shape3d", "total"):
            assert getattr(bd, term) == 0.0

    def test_all_alphas_zero_reduces_to_sl1(self):
        pred, gt, pred_c, gt_c, f_pred, f_gt = self._instance(22)
        w = LossWeights(alpha1=0, alpha2=0, alpha3=0, alpha4=0)
        bd = total_loss(pred, gt, pred_contours=pred_c, gt_contours=gt_c,
                        pred_shape3d=f_pred, gt_shape3d=f_gt, weights=w)
        assert bd.total == bd.sl1
        v_grid, _ = smooth_l1(pred.points, gt.points, channels=("x", "y", "theta", "rho"))
        v_rad, _ = smooth_l1(pred_c.radii, gt_c.radii)
        n_g, n_r = pred.points.size, pred_c.radii.size
        assert np.isclose(bd.sl1, (v_grid * n_g + v_rad * n_r) / (n_g + n_r))

    def test_breakdown_arithmetic(self):
        pred, gt, pred_c, gt_c, f_pred, f_gt = self._instance(23)
        w = LossWeights(alpha1=0.3, alpha2=0.7, alpha3=1.2, alpha4=0.4, gamma=1.0)
        bd = total_loss(pred, gt, pred_contours=pred_c, gt_contours=gt_c,
                        pred_shape3d=f_pred, gt_shape3d=f_gt, weights=w)
        expected = (
            bd.sl1
            + 0.3 * bd.diff
            + 0.7 * (bd.global_iou + bd.lrtb)
            + 1.2 * bd.local_iou
            + 0.4 * bd.shape3d
        )
        assert np.isclose(bd.total, expected, atol=1e-15)

    def test_contour_pairing_required(self):
        pred, gt, pred_c, _, _, _ = self._instance(24)
        with pytest.raises(ValueError):
            total_loss(pred, gt, pred_contours=pred_c)

    def test_mapping_scope_outer(self):
        pred, gt, pred_c, gt_c, _, _ = self._instance(25)
        w_all = LossWeights(use_contour_global=False, use_edge=False, gamma=0.0)
        w_outer = LossWeights(
            use_contour_global=False, use_edge=False, gamma=0.0, mapping_global_scope="outer"
        )
        bd_all = total_loss(pred, gt, pred_contours=pred_c, gt_contours=gt_c, weights=w_all)
        bd_outer = total_loss(pred, gt, pred_contours=pred_c, gt_contours=gt_c, weights=w_outer)
        value, _ = global_iou_loss(pred.rho.reshape(-1), gt.rho.reshape(-1))
        assert np.isclose(bd_all.global_iou, value)
        assert bd_outer.global_iou != bd_all.global_iou

    def test_gradient_against_finite_differences(self):
        from polardewarp.checks import loss_gradient_errors

        errs = loss_gradient_errors(seed=123)
        assert errs["total"] < 1e-4


class TestGradientCheck:
    def test_quadratic_is_exact(self):
        A = np.array([[2.0, 0.5], [0.5, 1.5]])
        b = np.array([1.0, -2.0])

        def quad(x):
            return 0.5 * x @ A @ x + b @ x, A @ x + b

        err = gradient_check(quad, np.array([0.3, -0.7]), epsilon=1e-4)
        assert err < 1e-10

    def test_detects_corrupted_gradient(self):
        A = np.eye(3) * 2.0

        def bad(x):
            return 0.5 * x @ A @ x, 1.1 * (A @ x)

        err = gradient_check(bad, np.array([1.0, 2.0, -1.0]), epsilon=1e-5)
        assert err > 1e-2

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            gradient_check(lambda x: (0.0, x), np.zeros(2), epsilon=1e-3)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha1=-0.1)
    with pytest.raises(ValueError):
        LossWeights(focal_mode="other")
    with pytest.raises(ValueError):
        LossWeights(diff_neighbors=5)
