import pytest
import torch

from regionreid.encoder import VisionBackbone, encode_image, global_average_pool

from conftest import finite_difference_max_rel


class TestShapes:
    def test_default_desk_shape(self):
        backbone = VisionBackbone(image_size=(64, 32), patch_size=8, out_dim=64, seed=0)
        fmap = encode_image(torch.rand(3, 64, 32), backbone)
        assert tuple(fmap.shape) == (64, 8, 4)

    def test_batched(self):
        backbone = VisionBackbone(image_size=(16, 16), patch_size=8, out_dim=12, seed=0)
        fmap = backbone(torch.rand(5, 3, 16, 16))
        assert tuple(fmap.shape) == (5, 12, 2, 2)

    def test_batch_matches_single(self):
        backbone = VisionBackbone(image_size=(16, 16), patch_size=8, out_dim=12, seed=0)
        images = torch.rand(3, 3, 16, 16)
        batched = backbone(images)
        singles = torch.stack([backbone(images[i]) for i in range(3)])
        assert torch.allclose(batched, singles, atol=1e-6)

    def test_size_mismatch_errors(self):
        backbone = VisionBackbone(image_size=(16, 16), patch_size=8, out_dim=12, seed=0)
        with pytest.raises(ValueError, match="expected input"):
            backbone(torch.rand(3, 16, 24))

    def test_indivisible_patch_errors(self):
        with pytest.raises(ValueError, match="not divisible"):
            VisionBackbone(image_size=(15, 16), patch_size=8)


class TestDeterminism:
    def test_same_input_same_output(self):
        backbone = VisionBackbone(image_size=(16, 16), patch_size=8, out_dim=12, seed=1)
        x = torch.rand(3, 16, 16)
        assert torch.equal(backbone(x), backbone(x))

    def test_same_seed_same_params(self):
        a = VisionBackbone(image_size=(16, 16), patch_size=8, out_dim=12, seed=4)
        b = VisionBackbone(image_size=(16, 16), patch_size=8, out_dim=12, seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_param_count_reported(self):
        backbone = VisionBackbone(image_size=(64, 32), patch_size=8, out_dim=64, seed=0)
        assert backbone.param_count() == sum(p.numel() for p in backbone.parameters())
        assert backbone.param_count() > 0


class TestNumerics:
    def test_finite_for_unit_interval_inputs(self):
        backbone = VisionBackbone(image_size=(64, 32), patch_size=8, out_dim=64, seed=2)
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            fmap = backbone(torch.rand(3, 64, 32, generator=g))
            assert bool(torch.isfinite(fmap).all())

    def test_gradient_matches_finite_differences(self):
        backbone = VisionBackbone(
            image_size=(16, 16), patch_size=8, out_dim=8, seed=3, dtype=torch.float64
        )
        g = torch.Generator().manual_seed(7)
        image = torch.rand(3, 16, 16, generator=g, dtype=torch.float64)
        readout = torch.randn(8, 2, 2, generator=g, dtype=torch.float64)
        params = list(backbone.parameters())

        def f():
            return (backbone(image) * readout).sum()

        rel = finite_difference_max_rel(f, params, coords_per_tensor=3)
        assert rel < 1e-4

    def test_gradient_wrt_input(self):
        backbone = VisionBackbone(
            image_size=(16, 16), patch_size=8, out_dim=8, seed=3, dtype=torch.float64
        )
        g = torch.Generator().manual_seed(8)
        image = torch.rand(3, 16, 16, generator=g, dtype=torch.float64, requires_grad=True)

        def f():
            return backbone(image).pow(2).sum()

        rel = finite_difference_max_rel(f, [image], coords_per_tensor=6)
        assert rel < 1e-4


class TestGlobalAveragePool:
    def test_constant_map(self):
        fmap = torch.full((7, 4, 3), 2.5)
        pooled = global_average_pool(fmap)
        assert torch.allclose(pooled, torch.full((7,), 2.5))

    def test_single_pixel(self):
        fmap = torch.randn(5, 1, 1)
        assert torch.equal(global_average_pool(fmap), fmap[:, 0, 0])

    def test_hand_summed_mean(self):
        g = torch.Generator().manual_seed(11)
        fmap = torch.rand(3, 2, 2, generator=g)
        # independent oracle: explicit summation
        expected = torch.tensor(
            [sum(float(fmap[c, x, y]) for x in range(2) for y in range(2)) / 4.0 for c in range(3)]
        )
        assert torch.allclose(global_average_pool(fmap), expected, atol=1e-6)

    def test_linearity(self):
        g = torch.Generator().manual_seed(12)
        f1 = torch.rand(4, 3, 3, generator=g)
        f2 = torch.rand(4, 3, 3, generator=g)
        a, b = 2.5, -1.25
        lhs = global_average_pool(a * f1 + b * f2)
        rhs = a * global_average_pool(f1) + b * global_average_pool(f2)
        assert torch.allclose(lhs, rhs, atol=1e-6)
