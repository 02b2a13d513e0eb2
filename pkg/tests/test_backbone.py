import math

import pytest
import torch

from helpers import central_fd, rel_err
from mami.backbone import (
    Backbone,
    BackboneConfig,
    embed_scan,
    l2_normalize,
    load_checkpoint,
    patchify,
    pool_global,
    save_checkpoint,
)
from mami.compa import AdapterBundle

TOY = BackboneConfig(depth=1, dim=16, heads=2)


def test_patchify_224_gives_196_tokens():
    assert patchify(torch.rand(3, 224, 224)).shape == (196, 768)


def test_patchify_constant_image():
    tok = patchify(torch.full((3, 64, 48), 0.25))
    assert torch.all(tok == 0.25)


def test_patchify_quadrants_raster_order():
    img = torch.zeros(3, 32, 32)
    colors = torch.tensor([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [0.5, 0.5, 0.5]])
    for q, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        img[:, 16 * r : 16 * r + 16, 16 * c : 16 * c + 16] = colors[q][:, None, None]
    tok = patchify(img)
    assert tok.shape == (4, 768)
    for q in range(4):
        # channel-major flattening: 256 values per channel
        expected = colors[q].repeat_interleave(256)
        assert torch.equal(tok[q], expected)


def test_patchify_rejects_odd_sizes():
    with pytest.raises(ValueError):
        patchify(torch.rand(3, 30, 32))


def test_feature_map_shape():
    net = Backbone(BackboneConfig()).eval()
    with torch.no_grad():
        f = net(torch.rand(1, 3, 224, 224))
    assert f.shape == (1, 128, 14, 14)
    assert torch.isfinite(f).all()


def test_zero_adapters_match_plain_forward():
    net = Backbone(TOY).eval()
    x = torch.rand(3, 3, 48, 32)
    bundle = AdapterBundle.zeros(net.target_shapes(), rank=4)
    with torch.no_grad():
        plain, adapted = net(x), net(x, bundle)
    assert (plain - adapted).abs().max() <= 1e-6 * plain.abs().max()


def test_adapter_shape_mismatch_names_layer():
    net = Backbone(TOY)
    shapes = dict(net.target_shapes())
    shapes["blocks.0.fc2"] = (16, 99)
    bundle = AdapterBundle.zeros(shapes, rank=2)
    with pytest.raises(ValueError, match="blocks.0.fc2"):
        net(torch.rand(1, 3, 32, 32), bundle)


def test_missing_adapter_layer_rejected():
    net = Backbone(TOY)
    shapes = dict(net.target_shapes())
    del shapes["blocks.0.attn.q"]
    with pytest.raises(ValueError, match="blocks.0.attn.q"):
        net(torch.rand(1, 3, 32, 32), AdapterBundle.zeros(shapes, rank=2))


def test_pool_global_constant_map():
    v = torch.tensor([3.0, 4.0])
    fmap = v[:, None, None].expand(2, 3, 5)
    assert torch.allclose(l2_normalize(pool_global(fmap)), v / 5.0)


def test_pool_global_two_positions():
    fmap = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])  # [d=2, h=1, w=2]
    assert torch.allclose(pool_global(fmap), torch.tensor([0.5, 0.5]))
    assert torch.allclose(l2_normalize(pool_global(fmap)), torch.full((2,), math.sqrt(2) / 2))


def test_pool_global_matches_loop_oracle():
    fmap = torch.randn(7, 3, 4, dtype=torch.float64)
    acc = torch.zeros(7, dtype=torch.float64)
    for i in range(3):
        for j in range(4):
            acc += fmap[:, i, j]
    assert torch.allclose(pool_global(fmap), acc / 12)


def test_pool_global_permutation_invariant():
    fmap = torch.randn(5, 4, 4)
    perm = torch.randperm(16)
    shuffled = fmap.flatten(1)[:, perm].reshape(5, 4, 4)
    assert torch.allclose(pool_global(fmap), pool_global(shuffled), atol=1e-6)


def test_embed_scan_definitions():
    u, v = torch.randn(8), torch.randn(8)
    assert torch.allclose(embed_scan(torch.stack([u, v])), l2_normalize((u + v) / 2))
    assert torch.allclose(embed_scan(torch.stack([u, u, u])), l2_normalize(u))
    with pytest.raises(ValueError):
        embed_scan(torch.zeros(0, 8))


def test_embed_scan_eight_slices_and_order():
    feats = torch.randn(8, 6, dtype=torch.float64)
    oracle = sum(feats[i] for i in range(8)) / 8
    assert torch.allclose(embed_scan(feats), oracle / oracle.norm())
    assert torch.allclose(embed_scan(feats), embed_scan(feats.flip(0)))


def test_input_gradient_matches_finite_differences():
    net = Backbone(TOY).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(1, 16, 2, 2, dtype=torch.float64)

    def f(inp):
        return (net(inp) * proj).sum()

    f(x).backward()
    fd = central_fd(f, x.detach().clone())
    assert rel_err(x.grad, fd) <= 1e-4


def test_positional_interpolation_for_other_grids():
    net = Backbone(TOY).eval()
    with torch.no_grad():
        assert net(torch.rand(2, 3, 64, 96)).shape == (2, 16, 4, 6)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = Backbone(TOY)
    save_checkpoint(tmp_path / "ck.pt", net.state_dict(), TOY)
    state, cfg, _ = load_checkpoint(tmp_path / "ck.pt")
    assert cfg == TOY
    for k, v in net.state_dict().items():
        assert torch.equal(state[k], v)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(patch_size=8)
