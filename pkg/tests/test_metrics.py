import math

import pytest
import torch

from ntscc.errors import ConfigError
from ntscc.metrics import RDCurve, RDPoint, bd_rate, cbr, flat_cosine, psnr


def make_curve(rates, qualities):
    pts = [RDPoint(rho=r, psnr_db=q, nu_db=10.0, lam=0.1, eta=0.2)
           for r, q in zip(rates, qualities)]
    return RDCurve(pts)


class TestPSNR:
    def test_identical_images_capped(self):
        x = torch.rand(3, 8, 8)
        assert psnr(x, x.clone()) == 100.0

    def test_known_mse(self):
        x = torch.zeros(3, 10, 10, dtype=torch.float64)
        x_hat = torch.full((3, 10, 10), 0.1, dtype=torch.float64)  # MSE = 0.01 -> 20 dB
        assert psnr(x, x_hat) == pytest.approx(20.0, abs=1e-9)

    def test_matches_reference_formula_random_pairs(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(10):
            x = torch.rand(3, 12, 12, generator=gen)
            x_hat = torch.rand(3, 12, 12, generator=gen)
            ref = 10.0 * math.log10(
                1.0 / float(((x.double() - x_hat.double()) ** 2).mean()))
            assert psnr(x, x_hat) == pytest.approx(ref, abs=1e-6)

    def test_masked_region(self):
        x = torch.zeros(3, 4, 4)
        x_hat = torch.zeros(3, 4, 4)
        x_hat[:, :2, :] = 0.5  # damage only the top half
        mask = torch.zeros(4, 4)
        mask[2:, :] = 1.0
        assert psnr(x, x_hat, mask=mask) == 100.0
        assert psnr(x, x_hat) < 100.0


class TestCBR:
    def test_definition_arithmetic(self):
        assert cbr(1000, 0, (512, 768)) == pytest.approx(1000 / (512 * 768 * 3))
        assert cbr(1000, 0, (512, 768)) == pytest.approx(8.477e-4, abs=5e-7)

    def test_zero_stream(self):
        assert cbr(0, 0, (64, 64)) == 0.0

    def test_sideinfo_strictly_increases(self):
        assert cbr(100, 10, (64, 64)) > cbr(100, 0, (64, 64))

    def test_accounting_identity(self):
        h, w, k, side = 128, 192, 777, 55
        rho = cbr(k, side, (h, w))
        assert rho * (h * w * 3) == pytest.approx(k + side, abs=1e-9)


class TestBDRate:
    def test_identical_curves_zero(self):
        curve = make_curve([0.01, 0.02, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])
        same = make_curve([0.01, 0.02, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])
        assert bd_rate(curve, same) == pytest.approx(0.0, abs=1e-9)

    def test_double_rate_is_plus_100(self):
        anchor = make_curve([0.01, 0.02, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])
        test = make_curve([0.02, 0.04, 0.1, 0.2], [28.0, 31.0, 34.0, 37.0])
        assert bd_rate(anchor, test) == pytest.approx(100.0, abs=0.1)

    def test_sign_convention_saving_is_negative(self):
        anchor = make_curve([0.01, 0.02, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])
        cheaper = make_curve([0.005, 0.01, 0.025, 0.05], [28.0, 31.0, 34.0, 37.0])
        assert bd_rate(anchor, cheaper) == pytest.approx(-50.0, abs=0.1)

    def test_antisymmetric_sign_for_shifted_curves(self):
        a = make_curve([0.01, 0.02, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])
        b = make_curve([0.015, 0.03, 0.075, 0.15], [28.0, 31.0, 34.0, 37.0])
        assert math.copysign(1, bd_rate(a, b)) == -math.copysign(1, bd_rate(b, a))

    def test_piecewise_variant_close_on_smooth_curves(self):
        anchor = make_curve([0.01, 0.02, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])
        test = make_curve([0.02, 0.04, 0.1, 0.2], [28.0, 31.0, 34.0, 37.0])
        assert bd_rate(anchor, test, piecewise=True) == pytest.approx(100.0, abs=0.5)

    def test_non_overlapping_ranges_rejected(self):
        a = make_curve([0.01, 0.02, 0.05, 0.1], [20.0, 21.0, 22.0, 23.0])
        b = make_curve([0.01, 0.02, 0.05, 0.1], [30.0, 31.0, 32.0, 33.0])
        with pytest.raises(ConfigError):
            bd_rate(a, b)

    def test_curve_invariants(self):
        with pytest.raises(ConfigError):
            make_curve([0.01, 0.02, 0.05], [28.0, 31.0, 34.0])  # too few
        with pytest.raises(ConfigError):
            make_curve([0.01, 0.01, 0.05, 0.1], [28.0, 31.0, 34.0, 37.0])


class TestCosine:
    def test_identical_vectors(self):
        v = torch.randn(32)
        assert flat_cosine(v, v) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_constructed_probes(self):
        a = torch.tensor([1.0, 0.0, 1.0, 0.0])
        b = torch.tensor([0.0, 1.0, 0.0, 1.0])
        assert flat_cosine(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            flat_cosine(torch.zeros(4), torch.ones(4))
