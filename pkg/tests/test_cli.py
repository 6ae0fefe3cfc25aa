import json

import nibabel as nib
import numpy as np
import pytest

from cmbpipe import pipeline
from cmbpipe.catalog import load_subject
from cmbpipe.cli import run
from cmbpipe.config import RunConfig
from cmbpipe.errors import MissingFile, MissingModel

SMALL = """inplane_size = 64
phantom_group = A
detector_epochs = 1
detector_width = 4
detector_learning_rate = 0.001
segmenter_epochs = 1
segmenter_widths = 4,8,16,32
segmenter_learning_rate = 0.001
overlays_per_subject = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.ini"
    cfg_path.write_text(SMALL + f"data_root = {root / 'data'}\noutput_dir = {root / 'run'}\n")
    assert run(["phantom", "-c", str(cfg_path), "-n", "3", "--slices", "16", "--size", "64",
                "--lesions", "2", "3"]) == 0
    assert run(["train", "-c", str(cfg_path)]) == 0
    return root, cfg_path


def test_phantom_files(workspace):
    root, _ = workspace
    for sid in ("9001", "9002", "9003"):
        for suffix in ("T1", "T2", "T2S", "CMB", "CONF"):
            assert (root / "data" / sid / f"{sid}_{suffix}.nii.gz").exists()


def test_train_artifacts_and_manifest(workspace):
    root, _ = workspace
    mdir = root / "run" / "models" / "A"
    for name in ("detector.pt", "segmenter.pt", "threshold.txt", "manifest.json"):
        assert (mdir / name).exists()
    manifest = json.loads((mdir / "manifest.json").read_text())
    assert manifest["split"]["train"] and manifest["split"]["val"]
    assert manifest["overrides"]["segmenter_epochs"] == 1
    assert set(manifest["artifacts"]) == {"detector", "segmenter", "threshold"}


def test_manifest_rerun_reproduces_config(workspace, tmp_path):
    root, cfg_path = workspace
    cfg = pipeline.config_from_manifest(root / "run" / "models" / "A" / "manifest.json")
    assert cfg == RunConfig.load(cfg_path)


def test_predict_and_evaluate(workspace, capsys):
    root, cfg_path = workspace
    assert run(["predict", "-c", str(cfg_path)]) == 0
    out = root / "run" / "predictions" / "9001_pred.nii.gz"
    img = nib.load(out)
    ref = load_subject(root / "data", "9001")
    assert img.shape == ref.shape[::-1]
    np.testing.assert_allclose(np.diag(img.affine)[:3], ref.t2s.spacing[::-1])
    assert set(np.unique(np.asarray(img.dataobj))) <= {0, 1}
    side = json.loads((root / "run" / "predictions" / "9001_manifest.json").read_text())
    assert side["stages"] == list(pipeline.PREDICT_STAGES)
    capsys.readouterr()
    assert run(["evaluate", "-c", str(cfg_path)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("subject,cohort,tp,fp,fn,dice")
    ev = root / "run" / "evaluation"
    assert (ev / "subjects.csv").exists() and (ev / "summary.csv").exists()
    assert (ev / "confusion_cohort9.png").exists()
    assert list((ev / "overlays").glob("9001_s*.png"))
    assert run(["plot", "-c", str(cfg_path)]) == 0


def test_predict_single_with_out(workspace, tmp_path):
    _, cfg_path = workspace
    target = tmp_path / "one.nii.gz"
    assert run(["predict", "-c", str(cfg_path), "9002", "--out", str(target)]) == 0
    assert target.exists()


def test_predict_is_deterministic(workspace):
    _, cfg_path = workspace
    cfg = RunConfig.load(cfg_path)
    a = pipeline.cmd_predict(cfg, "9003").mask
    b = pipeline.cmd_predict(cfg, "9003").mask
    np.testing.assert_array_equal(a, b)


def test_config_and_catalog_commands(workspace, capsys):
    _, cfg_path = workspace
    capsys.readouterr()
    assert run(["config", "-c", str(cfg_path), "--seed", "5"]) == 0
    assert "seed = 5" in capsys.readouterr().out
    assert run(["catalog", "-c", str(cfg_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].split("\t")[:2] == ["9001", "A"]


def test_error_exit_codes(workspace, tmp_path, capsys):
    _, cfg_path = workspace
    assert run(["phantom", "-c", str(cfg_path), "-n", "0"]) == 1
    assert run(["predict", "-c", str(cfg_path), "4242"]) == 1
    assert "predict" in capsys.readouterr().err
    empty = tmp_path / "empty.ini"
    empty.write_text(f"data_root = {tmp_path}\noutput_dir = {tmp_path / 'r'}\n")
    assert run(["train", "-c", str(empty)]) == 1
    assert run(["predict", "-c", str(empty), "101"]) == 1


def test_unknown_subject_raises_missing_file(workspace):
    _, cfg_path = workspace
    cfg = RunConfig.load(cfg_path)
    with pytest.raises(pipeline.StageError) as info:
        pipeline.cmd_predict(cfg, "4242")
    assert info.value.stage == "load" and isinstance(info.value.error, MissingFile)
    with pytest.raises(MissingModel):
        pipeline.load_models(cfg.replace(output_dir=str(cfg_path.parent / "nowhere")))


def test_train_requires_annotations(tmp_path):
    cfg = RunConfig(data_root=str(tmp_path / "d"), output_dir=str(tmp_path / "r"), phantom_group="A")
    pipeline.cmd_phantom(cfg, 2, pipeline.PhantomSpec(shape=(16, 64, 64)))
    (tmp_path / "d" / "9001" / "9001_CMB.nii.gz").unlink()
    with pytest.raises(pipeline.StageError) as info:
        pipeline.cmd_train(cfg)
    assert info.value.stage == "load" and isinstance(info.value.error, MissingFile)
