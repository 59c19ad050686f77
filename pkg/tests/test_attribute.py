import math

import pytest
import torch

from tbattr.attribute import (
    AttributeBlock,
    AttributeClassifier,
    AttributeProjection,
    attribute_bce_loss,
    channel_shuffle,
    fuse_attribute_scales,
)
from tbattr.errors import MissingLevel, ShapeError


def _channel_ramp(c, h=2, w=2):
    """(1, c, h, w) tensor whose every channel is filled with its own index."""
    return torch.arange(float(c)).view(1, c, 1, 1).expand(1, c, h, w).clone()


class TestChannelShuffle:
    def test_two_groups_of_two(self):
        out = channel_shuffle(_channel_ramp(4), groups=2)
        assert out[0, :, 0, 0].tolist() == [0.0, 2.0, 1.0, 3.0]

    def test_three_groups_of_two(self):
        out = channel_shuffle(_channel_ramp(6), groups=3)
        assert out[0, :, 0, 0].tolist() == [0.0, 2.0, 4.0, 1.0, 3.0, 5.0]

    def test_single_group_is_identity(self):
        x = torch.randn(2, 6, 3, 3)
        assert torch.equal(channel_shuffle(x, 1), x)

    def test_group_per_channel_is_identity(self):
        x = torch.randn(2, 6, 3, 3)
        assert torch.equal(channel_shuffle(x, 6), x)

    def test_inverse_composition(self):
        x = torch.randn(1, 12, 2, 2)
        assert torch.equal(channel_shuffle(channel_shuffle(x, 3), 4), x)

    def test_values_preserved(self):
        x = torch.randn(1, 8, 2, 2)
        out = channel_shuffle(x, 4)
        assert torch.equal(
            x.flatten().sort().values, out.flatten().sort().values
        )

    def test_unbatched_matches_batched(self):
        x = torch.randn(6, 3, 3)
        out = channel_shuffle(x, 2)
        assert out.shape == x.shape
        assert torch.equal(out, channel_shuffle(x.unsqueeze(0), 2).squeeze(0))

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ShapeError):
            channel_shuffle(torch.randn(1, 5, 2, 2), 2)

    def test_wrong_rank_rejected(self):
        with pytest.raises(ShapeError):
            channel_shuffle(torch.randn(4, 4), 2)


class TestAttributeBlock:
    def test_output_layout(self):
        torch.manual_seed(0)
        block = AttributeBlock(3, n_attributes=7, channels_per_attribute=2)
        maps = block(torch.randn(2, 3, 8, 8))
        assert len(maps) == 7
        for m in maps:
            assert m.shape == (2, 2, 8, 8)

    def test_zero_parameters_give_zero_maps(self):
        block = AttributeBlock(3, n_attributes=2, channels_per_attribute=2)
        with torch.no_grad():
            for param in block.parameters():
                param.zero_()
        maps = block(torch.randn(1, 3, 4, 4))
        for m in maps:
            assert torch.equal(m, torch.zeros_like(m))

    def test_grouped_conv_does_not_mix_groups(self):
        # Jacobian of the second grouped convolution is block diagonal:
        # input channels of attribute g only reach output channels of g.
        torch.manual_seed(1)
        block = AttributeBlock(3, n_attributes=2, channels_per_attribute=2).double()
        x = torch.randn(1, 4, 4, 4, dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(lambda t: block.gconv2(t), x)
        # jac shape: (1, 4, 4, 4, 1, 4, 4, 4); axis 1 = out channel, 5 = in.
        for out_c in range(4):
            for in_c in range(4):
                blockwise = jac[0, out_c, :, :, 0, in_c]
                if out_c // 2 == in_c // 2:
                    assert blockwise.abs().sum() > 0
                else:
                    assert torch.equal(blockwise, torch.zeros_like(blockwise))

    def test_shuffle_mixes_attributes_end_to_end(self):
        # With the shuffle in place, an input that only excites one group of
        # the projection still reaches every attribute map.
        torch.manual_seed(2)
        block = AttributeBlock(3, n_attributes=2, channels_per_attribute=2)
        maps = block(torch.randn(1, 3, 4, 4))
        grads = torch.autograd.grad(maps[0].sum(), block.gconv2.weight)[0]
        # attribute 0's output depends on both gconv2 groups via the shuffle
        assert grads[:2].abs().sum() > 0 and grads[2:].abs().sum() > 0

    def test_bad_configuration_rejected(self):
        with pytest.raises(ShapeError):
            AttributeBlock(3, n_attributes=0, channels_per_attribute=2)


class TestAttributeProjection:
    def test_output_layout_matches_block(self):
        torch.manual_seed(0)
        proj = AttributeProjection(3, n_attributes=4, channels_per_attribute=3)
        maps = proj(torch.randn(2, 3, 8, 8))
        assert len(maps) == 4
        for m in maps:
            assert m.shape == (2, 3, 8, 8)

    def test_has_no_grouped_convolutions(self):
        proj = AttributeProjection(3, 4, 3)
        assert not any("gconv" in name for name, _ in proj.named_modules())


class TestFuse:
    def _maps(self, n_attributes, channels, value, size=4):
        return [
            torch.full((1, channels, size, size), float(value))
            for _ in range(n_attributes)
        ]

    def test_four_scale_vector_length(self):
        per_level = {level: self._maps(7, 2, level) for level in (2, 3, 4, 5)}
        fused = fuse_attribute_scales(per_level)
        assert fused.shape == (1, 56)

    def test_single_scale_vector_length(self):
        per_level = {5: self._maps(7, 2, 1.0)}
        fused = fuse_attribute_scales(per_level, levels=(5,))
        assert fused.shape == (1, 14)

    def test_constant_maps_pool_to_constants_in_level_order(self):
        per_level = {level: self._maps(2, 3, level) for level in (2, 3, 4, 5)}
        fused = fuse_attribute_scales(per_level)
        expected = torch.cat(
            [torch.full((1, 6), float(level)) for level in (2, 3, 4, 5)], dim=1
        )
        assert torch.allclose(fused, expected)

    def test_pooling_is_linear(self):
        torch.manual_seed(0)
        a = {5: [torch.randn(2, 3, 4, 4) for _ in range(2)]}
        b = {5: [torch.randn(2, 3, 4, 4) for _ in range(2)]}
        combo = {5: [x + 2.0 * y for x, y in zip(a[5], b[5])]}
        lhs = fuse_attribute_scales(combo, levels=(5,))
        rhs = fuse_attribute_scales(a, levels=(5,)) + 2.0 * fuse_attribute_scales(
            b, levels=(5,)
        )
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_missing_level_rejected(self):
        per_level = {level: self._maps(2, 2, 1.0) for level in (2, 3, 4)}
        with pytest.raises(MissingLevel):
            fuse_attribute_scales(per_level)


class TestClassifier:
    def test_zero_parameters_give_half_probabilities(self):
        clf = AttributeClassifier(10, 7)
        with torch.no_grad():
            clf.fc.weight.zero_()
            clf.fc.bias.zero_()
        probs = clf(torch.randn(3, 10))
        assert probs.shape == (3, 7)
        assert torch.equal(probs, torch.full((3, 7), 0.5))

    def test_bias_sets_exact_probabilities(self):
        clf = AttributeClassifier(4, 2)
        with torch.no_grad():
            clf.fc.weight.zero_()
            clf.fc.bias.copy_(torch.tensor([math.log(3.0), -math.log(3.0)]))
        probs = clf(torch.zeros(1, 4))
        assert torch.allclose(probs, torch.tensor([[0.75, 0.25]]), atol=1e-6)

    def test_wrong_fused_length_rejected(self):
        clf = AttributeClassifier(10, 7)
        with pytest.raises(ShapeError):
            clf(torch.randn(1, 9))


class TestBceLoss:
    def test_uninformative_predictions_cost_log_two(self):
        probs = torch.full((3, 7), 0.5)
        labels = torch.randint(0, 2, (3, 7)).float()
        loss = attribute_bce_loss(probs, labels)
        assert abs(float(loss) - math.log(2.0)) < 1e-6

    def test_perfect_predictions_cost_nearly_nothing(self):
        labels = torch.tensor([[1.0, 0.0, 1.0]])
        loss = attribute_bce_loss(labels.clone(), labels)
        assert 0.0 <= float(loss) < 1e-5

    def test_loss_is_nonnegative(self, rng):
        probs = torch.tensor(rng.uniform(0.01, 0.99, size=(4, 5)), dtype=torch.float32)
        labels = torch.tensor(rng.integers(0, 2, size=(4, 5)), dtype=torch.float32)
        assert float(attribute_bce_loss(probs, labels)) >= 0.0

    def test_mask_drops_samples(self):
        probs = torch.tensor([[0.9, 0.1], [0.2, 0.2]])
        labels = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
        masked = attribute_bce_loss(probs, labels, mask=torch.tensor([1.0, 0.0]))
        solo = attribute_bce_loss(probs[:1], labels[:1])
        assert torch.allclose(masked, solo)

    def test_empty_mask_gives_exact_zero(self):
        probs = torch.rand(2, 3)
        labels = torch.randint(0, 2, (2, 3)).float()
        loss = attribute_bce_loss(probs, labels, mask=torch.zeros(2))
        assert float(loss) == 0.0

    def test_batch_order_invariance(self):
        torch.manual_seed(0)
        probs = torch.rand(5, 3)
        labels = torch.randint(0, 2, (5, 3)).float()
        perm = torch.tensor([4, 2, 0, 3, 1])
        a = attribute_bce_loss(probs, labels)
        b = attribute_bce_loss(probs[perm], labels[perm])
        assert torch.allclose(a, b, atol=1e-7)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            attribute_bce_loss(torch.rand(2, 3), torch.rand(2, 4))
        with pytest.raises(ShapeError):
            attribute_bce_loss(torch.rand(2, 3), torch.rand(2, 3), mask=torch.ones(3))


def test_attribute_branch_gradient(check_gradient):
    torch.manual_seed(5)
    block = AttributeBlock(3, n_attributes=2, channels_per_attribute=2).double()
    clf = AttributeClassifier(4, 2).double()
    labels = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)

    def fn():
        fused = fuse_attribute_scales({5: block(x)}, levels=(5,))
        return attribute_bce_loss(clf(fused), labels)

    check_gradient(fn, x)
