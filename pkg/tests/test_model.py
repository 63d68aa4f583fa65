import numpy as np
import pytest
import torch

from dwiseg.model import (
    InceptionBlock,
    ModelConfig,
    ResidualSkip,
    build_model,
    forward,
    group_names,
    param_groups,
)

SMALL = ModelConfig(n_levels=2, base_channels=4)


def test_group_names_layout():
    assert group_names(4) == [
        "Down-1", "Down-2", "Down-3", "Down-4", "Bottleneck", "Up-1", "Up-2", "Up-3", "Up-4", "Head"
    ]


@pytest.mark.parametrize("levels", [1, 2, 4])
def test_groups_partition_all_parameters(levels):
    model = build_model(ModelConfig(n_levels=levels, base_channels=8))
    groups = param_groups(model)
    assert list(groups) == group_names(levels)
    assert all(groups[g] for g in groups)
    names = [n for g in groups.values() for n in g]
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())
    assert len(names) == len(set(names))


def test_output_shape_and_range():
    model = build_model(ModelConfig(n_levels=4, base_channels=8))
    x = torch.randn(2, 1, 32, 48)
    with torch.no_grad():
        y = model(x)
    assert y.shape == (2, 1, 32, 48)
    assert float(y.min()) >= 0 and float(y.max()) <= 1


def test_non_divisible_spatial_size_rejected():
    model = build_model(ModelConfig(n_levels=4, base_channels=8))
    with pytest.raises(ValueError, match="divisible"):
        model(torch.zeros(1, 1, 40, 32))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 2, 32, 32))
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 32, 32)))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(base_channels=6)
    with pytest.raises(ValueError):
        ModelConfig(n_levels=0)


def test_same_seed_same_weights_and_rng_untouched():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(SMALL, seed=5)
    after = torch.rand(1)
    b = build_model(SMALL, seed=5)
    c = build_model(SMALL, seed=6)
    assert before == after
    for (n, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb), n
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_forward_is_deterministic():
    model = build_model(SMALL)
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    assert np.array_equal(forward(model, img), forward(model, img))


def test_inception_channels_and_zero_input():
    block = InceptionBlock(3, 8)
    for m in block.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.bias)
    y = block(torch.zeros(1, 3, 10, 12))
    assert y.shape == (1, 8, 10, 12)
    assert torch.count_nonzero(y) == 0
    with pytest.raises(ValueError):
        InceptionBlock(3, 6)


def test_inception_branch_order():
    # only the 1x1 branch passes a constant input through unchanged
    block = InceptionBlock(1, 4)
    with torch.no_grad():
        for m in block.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.zero_()
                m.bias.zero_()
        block.branch1.weight.fill_(1.0)
    y = block(torch.full((1, 1, 6, 6), 2.0))
    assert torch.all(y[0, 0] == 2.0) and torch.count_nonzero(y[0, 1:]) == 0


def test_residual_skip_is_identity_with_zero_conv():
    skip = ResidualSkip(3)
    with torch.no_grad():
        skip.conv.weight.zero_()
        skip.conv.bias.zero_()
    x = torch.randn(2, 3, 5, 5)
    assert torch.equal(skip(x), x)


def test_gradients_match_finite_differences():
    model = build_model(SMALL, seed=1, dtype=torch.float64)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    params = [p for p in model.parameters()]
    picks = [(params[0], 0), (params[len(params) // 2], 1), (params[-1], 0)]

    def f():
        return model(x).sum()

    f().backward()
    for p, i in picks:
        analytic = p.grad.reshape(-1)[i].item()
        flat = p.data.reshape(-1)
        h = 1e-6
        old = flat[i].item()
        flat[i] = old + h
        up = f().item()
        flat[i] = old - h
        down = f().item()
        flat[i] = old
        numeric = (up - down) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)
