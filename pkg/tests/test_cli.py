import json

import numpy as np
import pytest

from icodiff.cli import main
from icodiff.config import ConfigError, load_config
from icodiff.denoiser import load_checkpoint, denoiser_forward
from icodiff.featuremap import save_feature_map
from icodiff.pipeline import load_dataset, read_score_table
from icodiff.synthdata import load_manifest

# the spec's training smoke oracle scale: order 2, 20 subjects, 50 epochs
TINY_CONFIG = {
    "profile": "desk",
    "mesh_order": 2,
    "seed": 13,
    "denoiser": {"base_order": 2, "min_order": 1, "widths": [6, 12],
                 "attention_orders": [1]},
    "optimizer": {"epochs": 50, "batch_size": 4, "lr0": 2e-3},
    "sampler": {"t_noise": 40, "n_samples": 3},
    "cohort": {"scale": 0.05},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    assert main(["gen-data", "--config", str(cfg_path),
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(root / "data"),
                 "--out", str(root / "model.ickp")]) == 0
    return root, cfg_path


def test_gen_data_wrote_manifest(workspace):
    root, _ = workspace
    rows = load_manifest(root / "data")
    assert len(rows) == 20 + 4 + 4 + 4  # scale 0.05 of 400/82/82/82
    assert (root / "data" / "atlas.icra").exists()


def test_gen_data_creates_missing_directory(workspace, tmp_path):
    root, cfg_path = workspace
    nested = tmp_path / "deep" / "nested" / "dir"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(nested)]) == 0
    assert (nested / "manifest.tsv").exists()


def test_malformed_config_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mesh_order": 2, "optimizzer": {"epochs": 3}}))
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "optimizzer" in capsys.readouterr().err


def test_invalid_json_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_train_log_and_smoke(workspace):
    root, _ = workspace
    log = (root / "model.ickp.log").read_text().strip().splitlines()
    assert len(log) == TINY_CONFIG["optimizer"]["epochs"]
    assert log[0].startswith("epoch 0 loss ")
    losses = [float(line.split()[3]) for line in log]
    assert losses[-1] < 0.8 * losses[0]


def test_checkpoint_forward_roundtrip(workspace):
    root, _ = workspace
    model, metadata = load_checkpoint(root / "model.ickp")
    assert metadata["no_mask"] is False
    dataset = load_dataset(root / "data")
    rec = dataset.subjects[0]
    out1 = denoiser_forward(rec.features, rec.mask, 10, rec.age_scaled,
                            rec.gender, model)
    model2, _ = load_checkpoint(root / "model.ickp")
    out2 = denoiser_forward(rec.features, rec.mask, 10, rec.age_scaled,
                            rec.gender, model2)
    assert np.array_equal(out1.data, out2.data)


def test_train_no_mask_records_metadata(workspace):
    root, cfg_path = workspace
    assert main(["train", "--config", str(cfg_path), "--data", str(root / "data"),
                 "--out", str(root / "ablation.ickp"), "--no-mask"]) == 0
    _, metadata = load_checkpoint(root / "ablation.ickp")
    assert metadata["no_mask"] is True


def test_reconstruct_and_outputs(workspace):
    root, cfg_path = workspace
    assert main(["reconstruct", "--config", str(cfg_path),
                 "--checkpoint", str(root / "model.ickp"),
                 "--data", str(root / "data"), "--out", str(root / "recon"),
                 "--subjects", "cn_test_000,ad_000"]) == 0
    files = sorted(p.name for p in (root / "recon").iterdir())
    assert len(files) == 2 * TINY_CONFIG["sampler"]["n_samples"]
    assert files[0].startswith("recon_ad_000_")


def test_reconstruct_deterministic(workspace):
    root, cfg_path = workspace
    for out in ("recon_a", "recon_b"):
        assert main(["reconstruct", "--config", str(cfg_path),
                     "--checkpoint", str(root / "model.ickp"),
                     "--data", str(root / "data"), "--out", str(root / out),
                     "--subjects", "cn_test_001"]) == 0
    for k in range(TINY_CONFIG["sampler"]["n_samples"]):
        a = (root / "recon_a" / f"recon_cn_test_001_{k:02d}.icsf").read_bytes()
        b = (root / "recon_b" / f"recon_cn_test_001_{k:02d}.icsf").read_bytes()
        assert a == b


def test_reconstruct_parallel_workers_identical(workspace):
    # per-subject Philox streams make worker parallelism output-invariant
    root, cfg_path = workspace
    for out, workers in (("recon_w1", "1"), ("recon_w2", "2")):
        assert main(["reconstruct", "--config", str(cfg_path),
                     "--checkpoint", str(root / "model.ickp"),
                     "--data", str(root / "data"), "--out", str(root / out),
                     "--subjects", "mci_000,mci_001", "--workers", workers]) == 0
    for name in sorted(p.name for p in (root / "recon_w1").iterdir()):
        assert (root / "recon_w1" / name).read_bytes() == \
               (root / "recon_w2" / name).read_bytes()


def test_reconstruct_unknown_subject(workspace, capsys):
    root, cfg_path = workspace
    code = main(["reconstruct", "--config", str(cfg_path),
                 "--checkpoint", str(root / "model.ickp"),
                 "--data", str(root / "data"), "--out", str(root / "x"),
                 "--subjects", "nobody_000"])
    assert code == 2
    assert "nobody_000" in capsys.readouterr().err


def test_reconstruct_order_mismatch(workspace, tmp_path, capsys):
    root, cfg_path = workspace
    other = tmp_path / "order3.json"
    cfg = dict(TINY_CONFIG)
    cfg["mesh_order"] = 3
    cfg["denoiser"] = {"base_order": 3, "min_order": 1, "widths": [4, 6, 8]}
    cfg["cohort"] = {"scale": 0.02}
    other.write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(other),
                 "--out", str(tmp_path / "d3")]) == 0
    code = main(["reconstruct", "--config", str(other),
                 "--checkpoint", str(root / "model.ickp"),
                 "--data", str(tmp_path / "d3"), "--out", str(tmp_path / "r3")])
    assert code == 2
    assert "order" in capsys.readouterr().err


def test_score_and_classify(workspace):
    root, cfg_path = workspace
    assert main(["reconstruct", "--config", str(cfg_path),
                 "--checkpoint", str(root / "model.ickp"),
                 "--data", str(root / "data"), "--out", str(root / "recon_all"),
                 "--subjects", "test"]) == 0
    assert main(["score", "--data", str(root / "data"),
                 "--samples", str(root / "recon_all"),
                 "--out", str(root / "scores.tsv")]) == 0
    rows = read_score_table(root / "scores.tsv")
    assert len(rows) == 12
    assert all(len(r["scores"]) == 34 for r in rows)
    header = (root / "scores.tsv").read_text().splitlines()[0].split("\t")
    assert header[:2] == ["subject_id", "group"]
    assert len(header) == 2 + 34
    # k=4 folds: 4 subjects per class at this scale
    assert main(["classify", "--scores", str(root / "scores.tsv"),
                 "--folds", "4"]) == 0


def test_score_missing_samples_exits_2(workspace, capsys):
    root, _ = workspace
    code = main(["score", "--data", str(root / "data"),
                 "--samples", str(root / "recon_a"),  # only has cn_test_001
                 "--out", str(root / "nope.tsv"), "--subjects", "ad_001"])
    assert code == 2
    assert "ad_001" in capsys.readouterr().err


def test_score_template_baseline(workspace):
    root, _ = workspace
    assert main(["score", "--data", str(root / "data"),
                 "--samples", str(root / "recon_all"),
                 "--out", str(root / "scores_tmpl.tsv"),
                 "--template-baseline"]) == 0
    rows = read_score_table(root / "scores_tmpl.tsv")
    assert len(rows) == 12


def test_score_degenerate_reference_skips_subject(workspace, tmp_path, capsys):
    root, _ = workspace
    dataset = load_dataset(root / "data")
    rec = dataset.get("cn_test_000")
    degen = tmp_path / "degen"
    degen.mkdir()
    for k in range(3):
        save_feature_map(rec.features, degen / f"recon_cn_test_000_{k:02d}.icsf")
    code = main(["score", "--data", str(root / "data"), "--samples", str(degen),
                 "--out", str(tmp_path / "s.tsv"), "--subjects", "cn_test_000"])
    assert code == 2  # all subjects excluded -> nothing to write
    err = capsys.readouterr().err
    assert "cn_test_000" in err and "1 subject(s) excluded" in err


def test_eval_identical_recon_is_perfect(workspace, tmp_path):
    root, _ = workspace
    dataset = load_dataset(root / "data")
    rec = dataset.get("mci_000")
    perfect = tmp_path / "perfect"
    perfect.mkdir()
    for k in range(2):
        save_feature_map(rec.features, perfect / f"recon_mci_000_{k:02d}.icsf")
    from icodiff.pipeline import evaluate_reconstructions

    stats = evaluate_reconstructions(dataset, perfect, ["mci_000"])
    assert abs(stats["si_ssim"]["mean"] - 1.0) < 1e-9
    assert abs(stats["ct_ssim"]["mean"] - 1.0) < 1e-9
    assert stats["ct_mse_mm"]["mean"] < 1e-12


def test_eval_cli_runs(workspace):
    root, _ = workspace
    assert main(["eval", "--data", str(root / "data"),
                 "--samples", str(root / "recon_all"),
                 "--subjects", "cn_test_000,cn_test_001"]) == 0


def test_mesh_info(capsys):
    assert main(["mesh-info", "--order", "3"]) == 0
    out = capsys.readouterr().out
    assert "V=642" in out and "E=1920" in out and "F=1280" in out
    assert "euler=2" in out and "pentagons=12" in out


def test_show_config_profiles(capsys):
    assert main(["show-config", "--profile", "paper"]) == 0
    raw = json.loads(capsys.readouterr().out)
    assert raw["mesh_order"] == 6
    assert raw["optimizer"]["lr0"] == 1e-5


def test_config_seed_override(tmp_path):
    cfg = load_config(None, overrides={"seed": 99})
    assert cfg.seed == 99
    assert cfg.sampler.rng_seed == 99
    with pytest.raises(ConfigError):
        load_config(None, overrides={"nonsense": 1})


def test_config_t_noise_bound():
    with pytest.raises(ConfigError):
        load_config(None, overrides={"sampler": {"t_noise": 2000}})
