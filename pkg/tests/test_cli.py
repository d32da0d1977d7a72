import json
import shutil
import types
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from helpers import IdentityModel
from introvac import cli
from introvac.config import load_config, parse_config
from introvac.model import load_checkpoint

BASE_CONFIG = {
    "seed": 3,
    "model": {"image_size": 16, "latent_dim": 4, "channel_plan": [4, 8]},
    "train": {"epochs": 2, "batch_size": 16, "lr_decay_epochs": [], "checkpoint_every": 1},
    "data": {"kind": "synthetic", "count": 48, "test_count": 16},
}


def write_config(tmp_path, config=None, name="config.yaml", **top):
    cfg = dict(config or BASE_CONFIG)
    cfg.update(top)
    cfg.setdefault("output_dir", str(tmp_path / "run"))
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def assert_regenerates(out_dir):
    """Delete every artifact, re-run the recorded argv and compare content hashes."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    shutil.rmtree(out_dir)
    assert cli.main(manifest["argv"]) == 0
    again = json.loads((out_dir / "manifest.json").read_text())
    assert again["outputs"] == manifest["outputs"]
    assert len(manifest["outputs"]) > 0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg_path = write_config(tmp)
    assert run("train", "--config", cfg_path, "--quiet") == 0
    return tmp, cfg_path, tmp / "run" / "final.pt"


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("inputs")
    assert run("synth-data", "--count", 3, "--image-size", 16, "--seed", 11, "--output-dir", tmp) == 0
    return tmp / "images"


class TestTrain:
    def test_missing_required_field(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        del cfg["model"]["latent_dim"]
        code = run("train", "--config", write_config(tmp_path, cfg))
        assert code == 2
        assert "latent_dim" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        cfg["train"]["epochz"] = 3
        assert run("train", "--config", write_config(tmp_path, cfg)) == 2
        assert "train.epochz" in capsys.readouterr().err

    def test_outputs(self, trained):
        tmp, _, final = trained
        out = tmp / "run"
        for name in ("config.yaml", "metrics.jsonl", "loss_curves.png", "train_summary.json", "manifest.json",
                     "checkpoint_epoch_0001.pt", "checkpoint_epoch_0002.pt", "final.pt"):
            assert (out / name).exists(), name
        assert load_checkpoint(final)["epoch"] == 2

    def test_config_snapshot_round_trip(self, trained):
        tmp, cfg_path, _ = trained
        original = load_config(cfg_path)
        snapshot = parse_config(yaml.safe_load((tmp / "run" / "config.yaml").read_text()))
        assert snapshot.to_dict() == original.to_dict()

    @pytest.mark.parametrize("mode", ["vac", "introvac"])
    def test_mode_flag_controls_metric_fields(self, tmp_path, mode):
        cfg_path = write_config(tmp_path)
        out = tmp_path / mode
        assert run("train", "--config", cfg_path, "--mode", mode, "--epochs", 1, "--output-dir", out,
                   "--quiet") == 0
        steps = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        steps = [r for r in steps if r["type"] == "step"]
        for field in ("l_ec_rec", "l_ec_gen", "l_g_rec", "l_g_gen", "total_phase2"):
            assert all((field in r) == (mode == "introvac") for r in steps)
        assert load_checkpoint(out / "final.pt")["train_config"]["mode"] == mode

    def test_resume_matches_uninterrupted(self, trained, tmp_path):
        tmp, cfg_path, final = trained
        out = tmp_path / "resumed"
        assert run("train", "--config", cfg_path, "--output-dir", out, "--resume",
                   tmp / "run" / "checkpoint_epoch_0001.pt", "--quiet") == 0
        a = load_checkpoint(final)["model_state"]
        b = load_checkpoint(out / "final.pt")["model_state"]
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_manifest_regenerates(self, tmp_path):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        cfg["train"]["epochs"] = 1
        cfg_path = write_config(tmp_path, cfg)
        assert run("train", "--config", cfg_path, "--quiet") == 0
        assert_regenerates(tmp_path / "run")


class TestManipulate:
    def test_zero_delta(self, trained, inputs, tmp_path):
        _, _, ckpt = trained
        assert run("manipulate", "--checkpoint", ckpt, "--input", inputs, "--delta", "glasses=0",
                   "--output-dir", tmp_path / "m") == 0
        assert run("reconstruct", "--checkpoint", ckpt, "--input", inputs, "--output-dir", tmp_path / "r") == 0
        for f in sorted(inputs.iterdir()):
            edited = read_png(tmp_path / "m" / f"{f.stem}_edited.png")
            recon = read_png(tmp_path / "r" / "reconstructions" / f"{f.stem}.png")
            assert np.abs(edited - recon).max() <= 1e-6
            side = json.loads((tmp_path / "m" / f"{f.stem}.json").read_text())
            assert side["logits_before"] == side["logits_after"]

    def test_delta_shifts_logit(self, trained, inputs, tmp_path):
        _, _, ckpt = trained
        assert run("manipulate", "--checkpoint", ckpt, "--input", inputs, "--delta", "glasses=+3",
                   "--output-dir", tmp_path) == 0
        norm = load_checkpoint(ckpt)["model_state"]["head.weight"][0].double().norm().item()
        for f in sorted(inputs.iterdir()):
            side = json.loads((tmp_path / f"{f.stem}.json").read_text())
            shift = side["logits_after"]["glasses"] - side["logits_before"]["glasses"]
            assert shift == pytest.approx(3 * norm, abs=1e-4)
            assert side["direction_norms"]["glasses"] == pytest.approx(norm, rel=1e-6)

    def test_combined_edit(self, trained, inputs, tmp_path):
        _, _, ckpt = trained
        assert run("manipulate", "--checkpoint", ckpt, "--input", inputs, "--delta", "glasses=+4",
                   "--delta", "beard=+4", "--output-dir", tmp_path) == 0
        w = load_checkpoint(ckpt)["model_state"]["head.weight"][:2].double()
        u = w / w.norm(dim=1, keepdim=True)
        expected = (4 * u.sum(0)) @ w.T  # logit change per attribute
        side = json.loads((tmp_path / f"{sorted(inputs.iterdir())[0].stem}.json").read_text())
        for i, name in enumerate(("glasses", "beard")):
            assert side["logits_after"][name] - side["logits_before"][name] == pytest.approx(
                expected[i].item(), abs=1e-4)
        assert (tmp_path / "triptychs.png").exists()

    def test_unknown_attribute(self, trained, inputs, tmp_path, capsys):
        _, _, ckpt = trained
        code = run("manipulate", "--checkpoint", ckpt, "--input", inputs, "--delta", "smile=3",
                   "--output-dir", tmp_path)
        assert code == 2 and "smile" in capsys.readouterr().err

    def test_auto_mode_and_regeneration(self, trained, inputs, tmp_path):
        _, _, ckpt = trained
        out = tmp_path / "auto"
        assert run("manipulate", "--checkpoint", ckpt, "--input", inputs, "--auto", "beard=1",
                   "--output-dir", out) == 0
        side = json.loads((out / f"{sorted(inputs.iterdir())[0].stem}.json").read_text())
        assert side["deltas"]["beard"] > 0
        assert_regenerates(out)

    def test_missing_checkpoint_flag(self, inputs, tmp_path, capsys):
        assert run("manipulate", "--input", inputs, "--delta", "glasses=1", "--output-dir", tmp_path) == 2
        assert "--checkpoint" in capsys.readouterr().err


class TestSampling:
    def test_generate_deterministic(self, trained, tmp_path):
        _, _, ckpt = trained
        for name in ("a", "b"):
            assert run("generate", "--checkpoint", ckpt, "--count", 16, "--seed", 7,
                       "--output-dir", tmp_path / name) == 0
        for f in sorted((tmp_path / "a" / "samples").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "samples" / f.name).read_bytes()
        assert len(list((tmp_path / "a" / "samples").iterdir())) == 16
        assert_regenerates(tmp_path / "a")

    def test_langevin_defaults_recorded(self, trained, tmp_path):
        _, _, ckpt = trained
        assert run("langevin-sample", "--checkpoint", ckpt, "--target", "glasses=1", "--target", "beard=0",
                   "--chains", 4, "--output-dir", tmp_path / "l") == 0
        manifest = json.loads((tmp_path / "l" / "manifest.json").read_text())
        assert manifest["config"]["step_size"] == 0.0002
        assert manifest["config"]["steps"] == 5000
        assert manifest["num_accepted"] + manifest["num_rejected"] + manifest["num_discarded"] == 4
        latents = np.load(tmp_path / "l" / "latents.npy")
        assert latents.shape == (manifest["num_accepted"], 4)
        assert_regenerates(tmp_path / "l")

    def test_langevin_needs_every_target(self, trained, tmp_path):
        _, _, ckpt = trained
        assert run("langevin-sample", "--checkpoint", ckpt, "--target", "glasses=1",
                   "--output-dir", tmp_path) == 2

    def test_langevin_empty_result_exit_zero(self, trained, tmp_path, capsys, monkeypatch):
        _, _, ckpt = trained
        from introvac import latent_ops

        real = latent_ops.classify_matches
        monkeypatch.setattr(latent_ops, "classify_matches", lambda head, z, t: real(head, z, t) & False)
        assert run("langevin-sample", "--checkpoint", ckpt, "--target", "glasses=1", "--target", "beard=1",
                   "--chains", 3, "--steps", 5, "--output-dir", tmp_path) == 0
        assert "no Langevin samples" in capsys.readouterr().err
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["num_accepted"] == 0 and manifest["accepted_chains"] == []


class TestEvaluate:
    def test_checkpoint_dir_report(self, trained, tmp_path):
        tmp, cfg_path, _ = trained
        out = tmp_path / "e"
        assert run("evaluate", "--checkpoint-dir", tmp / "run", "--config", cfg_path, "--output-dir", out) == 0
        rows = json.loads((out / "report.json").read_text())
        assert [r["epoch"] for r in rows] == [1, 2]
        for r in rows:
            assert r["fid_reconstruction"] >= 0 and r["num_images"] == 16
            assert set(r) >= {"checkpoint", "dataset", "embedder", "fid_reconstruction", "l1_error",
                              "accuracy_per_attribute", "num_images", "seed"}
        assert (out / "fid_by_epoch.png").exists() and (out / "report.csv").exists()
        assert_regenerates(out)

    def test_identity_toy_checkpoint(self, inputs, tmp_path, monkeypatch):
        model = IdentityModel(shape=(3, 16, 16))
        model.config = types.SimpleNamespace(image_size=16, image_channels=3, attribute_names=["glasses"])
        monkeypatch.setattr(cli, "load_checkpoint", lambda p: {"epoch": None})
        monkeypatch.setattr(cli, "load_model", lambda p: model)
        assert run("evaluate", "--checkpoint", "toy.pt", "--data-dir", inputs.parent,
                   "--output-dir", tmp_path) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["fid_reconstruction"] == pytest.approx(0.0, abs=1e-9)
        assert report["l1_error"] == pytest.approx(0.0, abs=1e-12)

    def test_needs_data(self, trained, tmp_path):
        _, _, ckpt = trained
        assert run("evaluate", "--checkpoint", ckpt, "--output-dir", tmp_path) == 2


class TestSynthData:
    def test_layout_and_regeneration(self, tmp_path):
        out = tmp_path / "s"
        assert run("synth-data", "--count", 10, "--image-size", 16, "--output-dir", out) == 0
        assert (out / "list_attr_celeba.txt").read_text().splitlines()[0] == "10"
        assert len(list((out / "images").iterdir())) == 10
        assert_regenerates(out)

    def test_bad_arguments_exit_2(self, tmp_path):
        assert run("synth-data", "--count", 10, "--image-size", 8, "--output-dir", tmp_path) == 2
        assert run("no-such-command") == 2
