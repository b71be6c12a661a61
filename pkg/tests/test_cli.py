import json

import numpy as np
import pytest

from rigforge import __version__, io, mesh
from rigforge import motion as Mo
from rigforge.cli import config_hash, main
from rigforge.color import read_png

from conftest import FIXTURES
from test_motion import tiny_library

FAST_COLOR = ["epochs=5", "n_pairs=400", "eval_colors=50"]
FAST_FACE = ["epochs=2", "hidden=[8]"]


def run(*argv):
    return main([str(a) for a in argv])


def error_doc(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert lines[-2].startswith("rigforge: error: ")
    return json.loads(lines[-1])["error"]


@pytest.fixture(scope="module")
def color_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("color")
    assert run("color", "train", "--config", FIXTURES / "color/train.json", "--out", out, *FAST_COLOR) == 0
    return out / "color_model.json"


@pytest.fixture(scope="module")
def face_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("face")
    assert run("face", "train", "--config", FIXTURES / "face/train.json", "--out", out, *FAST_FACE) == 0
    return out / "face_model.json"


# -- each command ----------------------------------------------------------------------

def test_transfer(tmp_path):
    assert run("transfer", "--config", FIXTURES / "transfer/config.json", "--out", tmp_path) == 0
    report = io.read_json(tmp_path / "transfer_report.json")
    assert report["regions"]["fixed"]["max_displacement"] == 0.0
    lap = report["transition_laplacian"]
    assert lap["after_smoothing"] <= 0.5 * lap["before_smoothing"]
    text = (tmp_path / "transfer.obj").read_text()
    assert text.startswith("# rigforge ")
    assert mesh.read_obj(tmp_path / "transfer.obj").n_vertices == mesh.read_obj(FIXTURES / "transfer/initial.obj").n_vertices


def test_transfer_identity_returns_input(tmp_path):
    assert run("transfer", "--config", FIXTURES / "transfer_identity/config.json", "--out", tmp_path) == 0
    out = mesh.read_obj(tmp_path / "transfer.obj").vertices
    ref = mesh.read_obj(FIXTURES / "transfer_identity/initial.obj").vertices
    np.testing.assert_allclose(out, ref, atol=1e-8)


def test_calibrate(tmp_path):
    assert run("calibrate", "--config", FIXTURES / "calibrate/config.json", "--out", tmp_path) == 0
    doc = io.read_json(tmp_path / "calibration.json")
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("# rigforge") and trace[1] == "iteration,loss"
    losses = [float(r.split(",")[1]) for r in trace[2:]]
    assert losses[-1] < 1e-6 * losses[0]
    assert doc["provenance"]["command"] == "calibrate"


def test_calibrate_identity_needs_no_iterations(tmp_path):
    assert run("calibrate", "--config", FIXTURES / "calibrate/config_identity.json", "--out", tmp_path) == 0
    trace = (tmp_path / "trace.csv").read_text().splitlines()[2:]
    # skinning the rest pose reproduces the neutral up to round-off
    assert len(trace) == 1 and float(trace[0].split(",")[1]) < 1e-20


def test_color_train_report(color_model):
    report = io.read_json(color_model.parent / "color_report.json")
    assert {"heldout_mae", "round_trip", "provenance"} <= set(report)
    assert io.read_json(color_model)["provenance"]["command"] == "color train"


def test_color_correct_and_alpha_zero(tmp_path, color_model):
    args = ["color", "correct", "--config", FIXTURES / "color/correct.json", f"model={json.dumps(str(color_model))}"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "alpha=0", "--out", tmp_path / "b") == 0
    original = read_png(FIXTURES / "color/texture.png")
    assert read_png(tmp_path / "a/corrected.png").shape == original.shape
    assert np.array_equal(read_png(tmp_path / "b/corrected.png"), original)


def test_color_blend_png_provenance(tmp_path):
    from PIL import Image

    assert run("color", "blend", "--config", FIXTURES / "color/blend.json", "--out", tmp_path) == 0
    with Image.open(tmp_path / "blended.png") as im:
        prov = json.loads(im.text["rigforge"])
    assert prov["command"] == "color blend" and prov["version"] == __version__


def test_compose(tmp_path):
    assert run("compose", "--config", FIXTURES / "compose/config.json", "--out", tmp_path) == 0
    cost = io.read_json(tmp_path / "cost.json")
    assert abs(cost["audio_total"] + cost["edge_total"] - cost["total"]) < 1e-9
    assert len(cost["steps"]) == sum(k for _, k in cost["segments"])
    assert (tmp_path / "track.bvh").read_text().startswith("HIERARCHY")


def test_compose_four_nodes_matches_enumeration(tmp_path):
    expected = io.read_json(FIXTURES / "compose4/expected.json")
    assert run("compose", "--config", FIXTURES / "compose4/config.json", "--out", tmp_path) == 0
    cost = io.read_json(tmp_path / "cost.json")
    assert abs(cost["total"] - expected["total"]) < 1e-9 and cost["path"] == expected["path"]
    assert not (tmp_path / "track.bvh").exists()


def write_compose_case(tmp_path, lib, audio):
    Mo.write_library(tmp_path / "lib.json", lib)
    io.write_matrix(tmp_path / "audio.json", audio, "rigforge.audio-embedding/1", rate=2.0)
    return ["compose", "library=\"lib.json\"", "audio=\"audio.json\"", "category=1", "bvh=false",
            "--out", tmp_path / "out"]


def test_compose_single_window(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    lib = tiny_library(seed=1)
    assert run(*write_compose_case(tmp_path, lib, np.zeros((1, 3)))) == 0
    assert len(io.read_json(tmp_path / "out/cost.json")["path"]) == 1


def test_compose_infeasible_exit_3(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    lib = tiny_library(edges=[("n0", "n1")])
    assert run(*write_compose_case(tmp_path, lib, np.zeros((3, 3)))) == 3
    err = error_doc(capsys)
    assert err["type"] == "InfeasiblePathError" and err["step"] == 2 and err["exit_code"] == 3


def test_face_train_and_drive(tmp_path, face_model):
    report = io.read_json(face_model.parent / "face_report.json")
    assert report["n_tracks"] == 40 and "heldout_rec_per_entry" in report
    assert run("face", "drive", "--config", FIXTURES / "face/drive.json", "--out", tmp_path,
               f"model={json.dumps(str(face_model))}") == 0
    drive = io.read_json(tmp_path / "drive_report.json")
    assert [e["token"] for e in drive["skipped_events"]] == ["gasp"]
    assert drive["rec_per_entry"] >= 0
    header = io.read_json(tmp_path / "coefficients.json")
    assert header["provenance"]["command"] == "face drive"
    coeffs = np.loadtxt(tmp_path / "coefficients.csv", delimiter=",")
    assert coeffs.shape == (drive["frames"], drive["controls"])


# -- configuration ----------------------------------------------------------------------

def test_yaml_config_and_flags_override(tmp_path):
    import yaml
    from PIL import Image

    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"original": str(FIXTURES / "color/texture.png"),
                                   "relit": str(FIXTURES / "color/relit.png"), "mode": "blend", "seed": 3}))
    assert run("color", "--config", cfg, "--seed", "9", "alpha=0", "--out", tmp_path / "o") == 0
    with Image.open(tmp_path / "o/blended.png") as im:
        assert json.loads(im.text["rigforge"])["seed"] == 9
    assert np.array_equal(read_png(tmp_path / "o/blended.png"), read_png(FIXTURES / "color/texture.png"))


def test_config_hash_ignores_output_dir(tmp_path):
    for d in ("a", "b"):
        assert run("color", "blend", "--config", FIXTURES / "color/blend.json", "--out", tmp_path / d) == 0
    assert (tmp_path / "a/blended.png").read_bytes() == (tmp_path / "b/blended.png").read_bytes()
    assert len(config_hash({"x": 1})) == 64


@pytest.mark.parametrize("argv", [
    ["transfer", "--config", "missing.json"],
    ["calibrate", "--config", str(FIXTURES / "calibrate/config.json"), "bogus=1"],
    ["color", "paint"],
    ["color", "train", "epochs=\"many\""],
    ["compose", "--config", str(FIXTURES / "compose4/config.json"), "category=42"],
    ["nonsense"],
])
def test_bad_input_exit_2(tmp_path, capsys, argv):
    assert run(*argv, "--out", tmp_path) == 2
    assert error_doc(capsys)["exit_code"] == 2


def test_corrupted_model_exit_2(tmp_path, capsys, color_model):
    doc = io.read_json(color_model)
    doc["layers"][0]["weight"] = doc["layers"][0]["weight"][:1]
    bad = tmp_path / "bad.json"
    io.write_json(bad, doc)
    assert run("color", "correct", "--config", FIXTURES / "color/correct.json",
               f"model={json.dumps(str(bad))}", "--out", tmp_path / "o") == 2
    assert error_doc(capsys)["type"] == "FormatError"


def test_training_failure_exit_3(tmp_path, capsys):
    assert run("color", "train", "--config", FIXTURES / "color/train.json", "--out", tmp_path,
               "lr=1e300", "epochs=3", "n_pairs=300") == 3
    err = error_doc(capsys)
    assert err["type"] == "TrainingFailureError" and "epoch" in err["diagnostics"]


def test_section_for_other_command_is_ignored(tmp_path):
    cfg = tmp_path / "c.json"
    io.write_json(cfg, {"seed": 0, "color": {"mode": "blend", "original": str(FIXTURES / "color/texture.png"),
                                             "relit": str(FIXTURES / "color/relit.png")},
                        "transfer": {"initial": "x.obj"}})
    assert run("color", "--config", cfg, "--out", tmp_path / "o") == 0


def test_fixture_library_is_clean():
    lib = Mo.read_library(FIXTURES / "compose/library.json")
    assert Mo.lint_library(lib) == [] and lib.embedding_dim == 128


def test_missing_mask_names_path(tmp_path, capsys):
    cfg = io.read_json(FIXTURES / "transfer_identity/config.json")
    cfg = {k: str(FIXTURES / "transfer_identity" / v) if isinstance(v, str) else v for k, v in cfg.items()}
    cfg["mask"] = str(tmp_path / "nowhere.json")
    io.write_json(tmp_path / "c.json", cfg)
    assert run("transfer", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 2
    assert "nowhere.json" in error_doc(capsys)["message"]


def test_face_drive_dimension_mismatch_exit_2(tmp_path, capsys, face_model):
    from rigforge import face as F

    F.write_feature_track(tmp_path / "f.json", F.AudioFeatureTrack(np.zeros((10, 3))))
    assert run("face", "drive", f"model={json.dumps(str(face_model))}", f"features={json.dumps(str(tmp_path / 'f.json'))}",
               "--out", tmp_path / "o") == 2
    err = error_doc(capsys)
    assert err["type"] == "ModelError" and "dimension 3" in err["message"]


def test_face_drive_empty_events_equals_plain_drive(tmp_path, face_model):
    io.write_json(tmp_path / "none.json", [])
    base = ["face", "drive", "--config", FIXTURES / "face/drive.json", f"model={json.dumps(str(face_model))}"]
    assert run(*base, "events=null", "--out", tmp_path / "a") == 0
    assert run(*base, f"events={json.dumps(str(tmp_path / 'none.json'))}", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a/coefficients.csv").read_bytes() == (tmp_path / "b/coefficients.csv").read_bytes()


def test_override_paths_resolve_from_working_dir(tmp_path, monkeypatch, color_model):
    import shutil

    monkeypatch.chdir(tmp_path)
    shutil.copy(color_model, tmp_path / "local_model.json")
    assert run("color", "correct", "--config", FIXTURES / "color/correct.json", 'model="local_model.json"',
               "--out", "o") == 0
    assert (tmp_path / "o/corrected.png").exists()
