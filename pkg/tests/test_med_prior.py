import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_fd, rel_err
from mami.backbone import BackboneConfig
from mami.med_prior import (
    FeatureFileTeacher,
    KeyFeatureSet,
    MedAlignHead,
    MedConfig,
    QueryTokenNet,
    SyntheticTeacher,
    TeacherAdapter,
    TeacherRegistry,
    attention_map,
    difference,
    feature_difference,
    med_align_loss,
    pair_indices,
    select_key_feature,
)

TINY = BackboneConfig(depth=1, dim=16, heads=2)


def _brute_force_loss(U, V, tau):
    """Direct evaluation of the per-row -log S with explicit negative sets."""
    pairs, N, _ = U.shape
    total, count = 0.0, 0
    for p in range(pairs):
        for n in range(N):
            pos = math.exp(float(U[p, n] @ V[p, n]) / tau)
            neg = 0.0
            for q in range(pairs):
                for m in range(N):
                    if (q, m) != (p, n):
                        neg += math.exp(float(U[p, n] @ V[q, m]) / tau)
            total += -math.log(pos / (pos + neg))
            count += 1
    return total / count


# -- query tokens and attention ----------------------------------------------


def test_query_tokens_shape_and_determinism():
    net = QueryTokenNet(128, 8, 128)
    M = torch.randn(128)
    assert net(M).shape == (8, 128)
    assert torch.equal(net(M), net(M))
    assert net(torch.randn(3, 128)).shape == (3, 8, 128)


def test_attention_constant_map_is_uniform():
    keys = torch.ones(6, 4) * 0.7
    A = attention_map(torch.randn(3, 4), keys)
    assert torch.allclose(A, torch.full((3, 6), 1 / 6))


def test_attention_hand_value():
    # 2x2 map, d=2, identity key map, token (1, 0)
    keys = torch.tensor([[10.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    A = attention_map(torch.tensor([[1.0, 0.0]], dtype=torch.float64), keys)
    e = math.exp(10 / math.sqrt(2))
    assert A[0, 0].item() == pytest.approx(e / (e + 3), abs=1e-12)
    assert A[0, 0].item() == pytest.approx(0.997458, abs=5e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 12))
def test_attention_rows_are_distributions(seed, n, hw):
    g = torch.Generator().manual_seed(seed)
    A = attention_map(torch.randn(n, 8, generator=g) * 5, torch.randn(hw, 8, generator=g) * 5)
    assert (A >= 0).all()
    assert torch.allclose(A.sum(-1), torch.ones(n), atol=1e-6)


def test_select_key_feature_oracles():
    f = torch.randn(9, 5, dtype=torch.float64)  # 3x3 map flattened
    uniform = torch.full((1, 9), 1 / 9, dtype=torch.float64)
    assert torch.allclose(select_key_feature(uniform, f)[0], f.mean(0))
    onehot = torch.zeros(1, 9, dtype=torch.float64)
    onehot[0, 4] = 1
    assert torch.equal(select_key_feature(onehot, f)[0], f[4])
    A = torch.rand(2, 9, dtype=torch.float64).softmax(-1)
    oracle = torch.zeros(2, 5, dtype=torch.float64)
    for n in range(2):
        for o in range(9):
            oracle[n] += A[n, o] * f[o]
    assert torch.allclose(select_key_feature(A, f), oracle)


def test_key_features_lie_in_convex_hull():
    head = MedAlignHead(8, 8, MedConfig(queries=3))
    fmap = torch.rand(2, 8, 3, 3)
    P, A = head.key_features(torch.randn(2, 3, 8), fmap)
    flat = fmap.flatten(2).transpose(1, 2)
    lo, hi = flat.min(1).values, flat.max(1).values
    assert (P >= lo[:, None] - 1e-6).all() and (P <= hi[:, None] + 1e-6).all()
    assert torch.allclose(A.sum(-1), torch.ones(2, 3), atol=1e-6)


# -- differences ---------------------------------------------------------------


def test_difference_arithmetic():
    a = KeyFeatureSet(torch.tensor([[3.0, 4.0]]), "student")
    b = KeyFeatureSet(torch.tensor([[0.0, 0.0]]), "student")
    assert torch.allclose(difference(a, b), torch.tensor([[0.6, 0.8]]))


def test_self_difference_is_zero_not_nan():
    a = KeyFeatureSet(torch.randn(4, 6), "teacher")
    d = difference(a, a)
    assert torch.equal(d, torch.zeros(4, 6))


def test_difference_antisymmetry():
    a, b = torch.randn(3, 5), torch.randn(3, 5)
    assert torch.allclose(feature_difference(a, b), -feature_difference(b, a))


def test_difference_source_mismatch():
    with pytest.raises(ValueError, match="teacher"):
        difference(KeyFeatureSet(torch.zeros(1, 2), "student"), KeyFeatureSet(torch.zeros(1, 2), "teacher"))


# -- loss --------------------------------------------------------------------


def test_single_pair_single_token_loss_is_zero():
    u = torch.nn.functional.normalize(torch.randn(1, 1, 4), dim=-1)
    v = torch.nn.functional.normalize(torch.randn(1, 1, 4), dim=-1)
    assert med_align_loss(u, v).item() == pytest.approx(0.0, abs=1e-9)


def test_orthogonal_two_token_oracle():
    tau = 0.07
    V = torch.eye(3, dtype=torch.float64)[:2].reshape(1, 2, 3)
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + math.exp(0.0)))
    assert med_align_loss(V.clone(), V, tau).item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 3))
def test_loss_matches_brute_force(seed, pairs, N):
    g = torch.Generator().manual_seed(seed)
    U = torch.nn.functional.normalize(torch.randn(pairs, N, 4, generator=g, dtype=torch.float64), dim=-1)
    V = torch.nn.functional.normalize(torch.randn(pairs, N, 4, generator=g, dtype=torch.float64), dim=-1)
    assert med_align_loss(U, V, 0.07).item() == pytest.approx(_brute_force_loss(U, V, 0.07), rel=1e-9)


def test_negative_order_does_not_matter():
    U = torch.nn.functional.normalize(torch.randn(3, 2, 4, dtype=torch.float64), dim=-1)
    V = torch.nn.functional.normalize(torch.randn(3, 2, 4, dtype=torch.float64), dim=-1)
    perm = torch.tensor([2, 0, 1])
    assert med_align_loss(U, V).item() == pytest.approx(med_align_loss(U[perm], V[perm]).item(), rel=1e-12)


def test_loss_nonnegative_and_positive_with_negatives():
    U = torch.nn.functional.normalize(torch.randn(4, 3, 8), dim=-1)
    V = torch.nn.functional.normalize(torch.randn(4, 3, 8), dim=-1)
    assert med_align_loss(U, V).item() > 0


def test_loss_is_stable_at_extreme_logits():
    V = torch.nn.functional.normalize(torch.randn(2, 2, 3), dim=-1)
    loss = med_align_loss(V, V, tau=1e-4)
    assert torch.isfinite(loss)


def test_monotone_in_positive_similarity():
    tau = 0.07
    v_pos = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    v_neg = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    V = torch.stack([v_pos, v_neg]).reshape(1, 2, 3)
    losses = []
    for angle in np.linspace(0.0, 1.4, 8):
        # rotate u away from v_pos in the plane orthogonal to v_neg
        u = torch.tensor([math.cos(angle), 0.0, math.sin(angle)], dtype=torch.float64)
        U = torch.stack([u, v_neg]).reshape(1, 2, 3)
        losses.append(med_align_loss(U, V, tau).item())
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_empty_teacher_set_rejected():
    with pytest.raises(ValueError):
        med_align_loss(torch.zeros(0, 2, 3), torch.zeros(0, 2, 3))


def test_loss_gradient_matches_finite_differences():
    U = torch.nn.functional.normalize(torch.randn(2, 2, 5, dtype=torch.float64), dim=-1).requires_grad_(True)
    V = torch.nn.functional.normalize(torch.randn(2, 2, 5, dtype=torch.float64), dim=-1)
    med_align_loss(U, V).backward()
    fd = central_fd(lambda u: med_align_loss(u, V), U.detach().clone())
    assert rel_err(U.grad, fd) <= 1e-4


def test_pairs_span_two_patients():
    i, j = pair_indices(16, 4)
    assert torch.equal(j, (torch.arange(16) + 4) % 16)
    assert all(a // 4 != b // 4 for a, b in zip(i.tolist(), j.tolist()))


# -- teachers ----------------------------------------------------------------


def test_registry_unknown_label_lists_registered():
    reg = TeacherRegistry.synthetic(["synth0", "synth1"], config=TINY)
    with pytest.raises(KeyError, match="synth0"):
        reg.get("xray")


def test_synthetic_teachers_are_distinct_and_reproducible():
    a = TeacherRegistry.synthetic(["m0", "m1"], seed=1000, config=TINY)
    b = TeacherRegistry.synthetic(["m0", "m1"], seed=1000, config=TINY)
    x = torch.rand(2, 3, 32, 32)
    f0, f1 = a.get("m0")(x), a.get("m1")(x)
    assert not torch.allclose(f0, f1)
    assert torch.equal(f0, b.get("m0")(x))


def test_teacher_construction_does_not_disturb_global_rng():
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    SyntheticTeacher(123, TINY)
    assert torch.equal(torch.rand(3), expected)


def test_teacher_maps_grouped_by_label():
    reg = TeacherRegistry.synthetic(["a", "b"], config=TINY)
    x = torch.rand(3, 3, 32, 32)
    maps = reg.feature_maps(x, ["b", "a", "b"])
    assert torch.allclose(maps[1], reg.get("a")(x[1:2])[0], atol=1e-6)
    assert torch.allclose(maps[2], reg.get("b")(x[2:3])[0], atol=1e-6)
    assert not maps[0].requires_grad


def test_teacher_params_unchanged_by_training_steps():
    reg = TeacherRegistry.synthetic(["a"], config=TINY)
    before = {k: v.clone() for k, v in reg.get("a").state_dict().items()}
    head = MedAlignHead(16, 16, MedConfig(queries=2))
    opt = torch.optim.AdamW(head.parameters(), lr=1e-2)
    fmap = torch.randn(4, 16, 2, 2, requires_grad=True)
    for _ in range(3):
        tmaps = reg.feature_maps(torch.rand(4, 3, 32, 32), ["a"] * 4)
        tmap = head.project_teacher(tmaps, (2, 2))
        loss = head(fmap, tmap, torch.randn(4, 2, 16), pair_indices(4, 2))
        opt.zero_grad()
        loss.backward()
        opt.step()
    for k, v in reg.get("a").state_dict().items():
        assert torch.equal(v, before[k])
    assert all(p.grad is None for p in reg.parameters())


def test_teacher_keys_for_constant_teacher_map():
    head = MedAlignHead(4, 4, MedConfig(queries=3))
    const = torch.tensor([0.5, -1.0, 2.0, 0.25])
    tmap = const[None, :, None, None].expand(1, 4, 3, 3)
    Q, _ = head.key_features(torch.randn(1, 3, 4), tmap, teacher=True)
    assert torch.allclose(Q[0], const.expand(3, 4), atol=1e-6)


def test_teacher_adapter_is_frozen_and_resamples():
    ad = TeacherAdapter(32, 16, seed=3)
    assert not list(ad.parameters())
    out = ad(torch.randn(2, 32, 7, 7), (4, 4))
    assert out.shape == (2, 16, 4, 4)
    assert torch.equal(ad.proj, TeacherAdapter(32, 16, seed=3).proj)


def test_feature_file_teacher(tmp_path):
    maps = {"r1": np.ones((6, 2, 2), np.float32), "r2": np.zeros((6, 2, 2), np.float32)}
    np.savez(tmp_path / "xray.npz", **maps)
    reg = TeacherRegistry.from_directory(tmp_path)
    out = reg.feature_maps(torch.zeros(2, 3, 32, 32), ["xray", "xray"], ["r2", "r1"])
    assert torch.equal(out[1], torch.ones(6, 2, 2))
    with pytest.raises(KeyError):
        reg.get("xray")(torch.zeros(1, 3, 32, 32), ["nope"])
    assert reg.get("xray").out_dim == 6
    assert isinstance(reg.get("xray"), FeatureFileTeacher)


@pytest.mark.parametrize("mode", ["global", "local", "selected", "selected_mlp_relation", "selected_subtraction"])
def test_all_alignment_modes_give_finite_loss_and_gradients(mode):
    head = MedAlignHead(8, 12, MedConfig(mode=mode, queries=2))
    fmap = torch.randn(4, 8, 2, 2, requires_grad=True)
    tmap = head.project_teacher(list(torch.randn(4, 12, 3, 3)), (2, 2))
    loss = head(fmap, tmap, torch.randn(4, 2, 8), pair_indices(4, 2))
    loss.backward()
    assert torch.isfinite(loss) and fmap.grad.abs().sum() > 0


def test_scan_key_features_are_averaged_per_scan():
    head = MedAlignHead(8, 8, MedConfig(mode="selected", queries=2))
    fmap = torch.randn(2, 8, 2, 2)
    tmap = torch.randn(2, 8, 2, 2)
    tokens = torch.randn(2, 2, 8)
    # two identical slices per scan must match a single-slice batch
    doubled = head(fmap.repeat_interleave(2, 0), tmap.repeat_interleave(2, 0), tokens.repeat_interleave(2, 0), pair_indices(2, 1), n_slices=2)
    single = head(fmap, tmap, tokens, pair_indices(2, 1))
    assert doubled.item() == pytest.approx(single.item(), rel=1e-5)
