import csv
import dataclasses

import pytest
import torch

from mami import ablation
from mami.ablation import VARIANTS, VariantSpec, build_model, run_variant, sweep, write_results
from mami.backbone import BackboneConfig
from mami.compa import CompaConfig
from mami.config import RunConfig
from mami.data import SynthConfig, generate_synthetic, split_query_gallery, split_train_eval
from mami.med_prior import MedConfig


@pytest.fixture(scope="module")
def manifest():
    m = generate_synthetic(SynthConfig(n_patients=8, images_per_patient=3, image_size=32, seed=4))
    split_train_eval(m, 4, 0)
    split_query_gallery(m, 0)
    return m


@pytest.fixture(scope="module")
def base():
    return RunConfig(
        backbone=BackboneConfig(depth=1, dim=16, heads=2),
        compa=CompaConfig(codes=4, rank=2, groups=4),
        med=MedConfig(queries=2),
    ).replace(train={"P": 2, "K": 2, "crop_size": 32, "resize_size": 32, "total_steps": 3})


def _tiny(name):
    # variant specs carry their own L, r, G and N; shrink them to the toy backbone
    return dataclasses.replace(VARIANTS[name], L=4, r=2, G=4, N=2)


def test_contradictory_flags_rejected():
    with pytest.raises(ValueError, match="contradicts"):
        VariantSpec("bad", use_compa=False, modality_mode="continuous_codebook")
    with pytest.raises(ValueError):
        VariantSpec("bad", med_align="psychic")
    with pytest.raises(ValueError):
        VariantSpec("bad", lam=-0.1)


def test_named_variants_map_to_configs(base):
    for spec in VARIANTS.values():
        cfg = spec.apply(base)
        assert cfg.compa.mode == spec.modality_mode
        assert cfg.med.mode == spec.med_align
        assert (cfg.train.lambda_med == 0) == (spec.med_align == "off")


def test_base_and_full_differ_only_in_flags(base):
    a, b = _tiny("M_base").apply(base), _tiny("M_ours").apply(base)
    assert a.backbone == b.backbone
    assert {k: v for k, v in vars(a.train).items() if k != "lambda_med"} == {
        k: v for k, v in vars(b.train).items() if k != "lambda_med"
    }


def test_variants_share_initial_backbone(base):
    a = build_model(_tiny("M_base").apply(base), 4)
    b = build_model(_tiny("M_ours").apply(base), 4)
    for (n, p), (_, q) in zip(a.backbone.named_parameters(), b.backbone.named_parameters()):
        assert torch.equal(p, q), n


def test_discrete_mode_uses_one_hot_weights(base):
    model = build_model(_tiny("M_mod1").apply(base), 4)
    x = torch.rand(2, 3, 32, 32)
    out = model(x, torch.tensor([1, 0]))
    assert torch.equal(out.w, torch.eye(4)[[1, 0]])


def test_run_variant_reports(manifest, base, tmp_path):
    r1 = run_variant(_tiny("M_base"), manifest, 0, base)
    r2 = run_variant(_tiny("M_ours"), manifest, 0, base, run_dir=tmp_path)
    for r in (r1, r2):
        assert set(ablation.RESULT_COLUMNS) <= set(r)
        assert 0 <= r["R1"] <= 100 and r["steps"] == 3
    assert (tmp_path / "metrics.csv").exists()


def test_sweep_emits_one_row_per_value(manifest, base, tmp_path):
    reports = sweep("r", [1, 2, 4], _tiny("M_compa"), manifest, 0, base, tmp_path / "r.csv")
    assert [r["variant"] for r in reports] == ["M_compa[r=1]", "M_compa[r=2]", "M_compa[r=4]"]
    with (tmp_path / "r.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(ablation.RESULT_COLUMNS) and len(rows) == 3


def test_sweep_validation(manifest, base):
    with pytest.raises(ValueError):
        sweep("depth", [1], VARIANTS["M_ours"], manifest, 0, base)
    with pytest.raises(ValueError):
        sweep("r", [], VARIANTS["M_ours"], manifest, 0, base)


def test_write_results_columns(tmp_path):
    write_results([{"variant": "v", "R1": 1.0, "R5": 2.0, "steps": 3, "wall_seconds": 0.1, "extra": 1}], tmp_path / "o.csv")
    assert (tmp_path / "o.csv").read_text().splitlines()[0] == "variant,R1,R5,steps,wall_seconds"
