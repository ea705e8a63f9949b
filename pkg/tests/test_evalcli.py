import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmesh.checkpoint import CheckpointError
from rdmesh.cli import main
from rdmesh.conditioning import MissingFramesError, write_pgm_video
from rdmesh.dataset import CurationConfig, curate, write_clip
from rdmesh.mesh import StaticMesh, load_obj, save_obj
from rdmesh.metrics import ClipScores, EvalReport, eucd, silhouette_iou, silhouette_psnr, smoothness
from rdmesh.pipeline import CheckpointMismatchError, FilterError, VideoMismatchError, animate, export_obj_sequence
from rdmesh.rf import RFConfig, RFModel
from rdmesh.trainer import TrainConfig, train_rf, train_vae

TINY_VAE = dict(layers_enc=1, layers_dec=1, feature_dim=8, heads=2, d_cond=4, d_jump=2, d_traj=4, frame_count=4)
TINY_RF = dict(blocks=1, model_dim=16, heads=2, mlp_ratio=2, time_freq_dim=8, d_cond=4, d_jump=2, d_traj=4,
               frames=4, resolution=8, patch_t=2, patch_s=4, d_vid=6)


# -- EucD ------------------------------------------------------------------


def eucd_loop(pred, gt, mask):
    total, count = 0.0, 0
    for t in range(pred.shape[0]):
        for n in range(pred.shape[1]):
            if mask[n]:
                total += math.sqrt(sum((pred[t, n, k] - gt[t, n, k]) ** 2 for k in range(3)))
                count += 1
    return total / count


def test_eucd_examples(rng):
    a = rng.normal(size=(3, 5, 3))
    assert eucd(a, a) == 0.0
    assert math.isclose(eucd(a + [0.3, 0, 0], a), 0.3, rel_tol=1e-12)


def test_eucd_matches_flat_loop(rng):
    a, b = rng.normal(size=(4, 6, 3)), rng.normal(size=(4, 6, 3))
    mask = np.array([1, 1, 0, 1, 1, 0], bool)
    assert math.isclose(eucd(a, b, mask), eucd_loop(a, b, mask), rel_tol=1e-13)


def test_eucd_ignores_padding(rng):
    a = rng.normal(size=(2, 4, 3))
    b = a.copy()
    b[:, 3] += 10
    assert eucd(a, b, np.array([1, 1, 1, 0], bool)) == 0.0


def test_eucd_shape_mismatch():
    with pytest.raises(ValueError):
        eucd(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_eucd_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(3, 4, 3)) for _ in range(3))
    assert eucd(a, b) > 0 and eucd(a, b) == eucd(b, a)
    assert eucd(a, c) <= eucd(a, b) + eucd(b, c) + 1e-12


# -- silhouette metrics ------------------------------------------------------


def test_psnr_examples(rng):
    v = (rng.random((3, 8, 8)) > 0.5).astype(float)
    assert silhouette_psnr(v, v) == 100.0
    assert silhouette_psnr(np.zeros((2, 4, 4)), np.ones((2, 4, 4))) == 0.0


def test_psnr_matches_reference(rng):
    a, b = (rng.random((3, 8, 8)) > 0.5).astype(float), (rng.random((3, 8, 8)) > 0.5).astype(float)
    per = [10 * math.log10(1 / (np.sum((a[t] - b[t]) ** 2) / 64)) for t in range(3)]
    assert math.isclose(silhouette_psnr(a, b), sum(per) / 3, rel_tol=1e-13)


def test_psnr_resolution_mismatch():
    with pytest.raises(ValueError):
        silhouette_psnr(np.zeros((2, 4, 4)), np.zeros((2, 5, 5)))


def test_iou():
    a = np.zeros((1, 2, 2))
    b = np.zeros((1, 2, 2))
    a[0, 0, :] = 1
    b[0, :, 0] = 1
    assert silhouette_iou(a, b) == 1 / 3
    assert silhouette_iou(np.zeros((1, 2, 2)), np.zeros((1, 2, 2))) == 1.0


# -- smoothness ----------------------------------------------------------------


def test_smoothness_linear_and_static():
    t = np.arange(6, dtype=float)[:, None, None]
    assert smoothness(np.ones((6, 4, 3)) * t * [1.0, 2.0, 0.0]) == 1.0
    assert smoothness(np.ones((5, 4, 3))) == 1.0


def test_smoothness_jitter():
    delta = 0.1
    seq = np.zeros((8, 3, 3))
    seq[:, :, 0] = delta * (-1.0) ** np.arange(8)[:, None]
    score = smoothness(seq)
    assert math.isclose(score, math.exp(-4 * delta / (2 * delta + 1e-8)), rel_tol=1e-9)
    assert score < 0.5


def test_smoothness_needs_three_frames():
    with pytest.raises(ValueError):
        smoothness(np.zeros((2, 3, 3)))


def test_report_aggregates_are_means():
    r = EvalReport()
    r.add(ClipScores("a", 10.0, 0.5, 0.9, 0.1))
    r.add(ClipScores("b", 20.0, 1.0, 0.7, None))
    agg = r.aggregates
    assert agg["psnr"] == 15.0 and agg["iou"] == 0.75 and math.isclose(agg["smoothness"], 0.8)
    assert agg["eucd"] == 0.1
    assert json.loads(r.to_json())["mean"] == agg


# -- OBJ export ------------------------------------------------------------------


def test_obj_export_round_trip(tmp_path, rng):
    frames = rng.normal(size=(3, 6, 3))
    faces = np.array([[0, 1, 2], [2, 3, 4], [5, 5, 5]])
    paths = export_obj_sequence(frames, faces, tmp_path, real_n=5, real_m=2)
    assert [p.name for p in paths] == ["frame_0000.obj", "frame_0001.obj", "frame_0002.obj"]
    text = paths[0].read_text()
    assert "f 1 2 3" in text and "f 3 4 5" in text
    assert all(len(line.split()[1].split(".")[1]) == 6 for line in text.splitlines() if line.startswith("v "))
    for t, p in enumerate(paths):
        m = load_obj(p)
        assert m.vertices.shape == (5, 3) and m.faces.shape == (2, 3)
        assert np.abs(m.vertices - frames[t, :5]).max() <= 5e-7


# -- animate -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_models():
    records = list(curate(CurationConfig(num_clips=3, T=4, resolution=3, render_resolution=8), seed=0))
    vae = train_vae(TrainConfig(stage="vae", iterations=3, batch_size=2, lr=1e-3, vae=dict(TINY_VAE)), records).model
    rf = train_rf(TrainConfig(stage="rf", iterations=3, batch_size=2, schedule="constant", lr=1e-3, eval_draws=0, rf=dict(TINY_RF)), vae, records).model
    return vae, rf, records


@pytest.fixture(scope="module")
def saved_models(tmp_path_factory, tiny_models):
    vae, rf, records = tiny_models
    d = tmp_path_factory.mktemp("models")
    from dataclasses import asdict

    from rdmesh.checkpoint import save_checkpoint
    from rdmesh.trainer import model_checkpoint

    save_checkpoint(d / "vae.ckpt", model_checkpoint("vae", vae, asdict(vae.cfg), 3))
    save_checkpoint(d / "rf.ckpt", model_checkpoint("rf", rf, asdict(rf.cfg), 3))
    rec = records[0]
    save_obj(d / "mesh.obj", rec.condition)
    write_pgm_video(rec.silhouette_video, d / "video")
    write_clip(rec, d / "clip.dmc")
    return d


def test_animate_frame_count_and_report(tmp_path, tiny_models):
    vae, rf, records = tiny_models
    rec = records[0]
    res = animate(rec.condition, rec.silhouette_video, vae, rf, tmp_path, steps=3, gt=rec.sequence)
    assert len(res.paths) == rec.silhouette_video.shape[0] == 4
    assert np.isfinite(res.frames_world).all()
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["clips"][0]["eucd"] is not None
    assert 0 <= report["mean"]["smoothness"] <= 1


def test_animate_is_byte_deterministic(tmp_path, tiny_models):
    vae, rf, records = tiny_models
    rec = records[1]
    a = animate(rec.condition, rec.silhouette_video, vae, rf, tmp_path / "a", steps=3, seed=9)
    b = animate(rec.condition, rec.silhouette_video, vae, rf, tmp_path / "b", steps=3, seed=9)
    assert [p.read_bytes() for p in a.paths] == [p.read_bytes() for p in b.paths]


def test_animate_pose_only(tmp_path, tiny_models):
    vae, rf, records = tiny_models
    rec = records[0]
    full = animate(rec.condition, rec.silhouette_video, vae, rf, None, steps=3, seed=1)
    pose = animate(rec.condition, rec.silhouette_video, vae, rf, tmp_path, steps=3, seed=1, pose_only=True)
    assert len(pose.paths) == 1
    assert np.array_equal(pose.frames_world[0], full.frames_world[0])


def test_animate_errors(tmp_path, tiny_models):
    vae, rf, records = tiny_models
    rec = records[0]
    big = StaticMesh(np.random.default_rng(0).normal(size=(9000, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(FilterError):
        animate(big, rec.silhouette_video, vae, rf)
    other = RFModel(RFConfig(**{**TINY_RF, "d_traj": 5}))
    with pytest.raises(CheckpointMismatchError) as info:
        animate(rec.condition, rec.silhouette_video, vae, other)
    assert isinstance(info.value, CheckpointError)
    with pytest.raises(MissingFramesError):
        animate(rec.condition, tmp_path / "nothing", vae, rf)
    with pytest.raises(VideoMismatchError):
        animate(rec.condition, rec.silhouette_video[:2], vae, rf)
    kinds = {FilterError, CheckpointMismatchError, MissingFramesError, VideoMismatchError}
    assert len(kinds) == 4


# -- CLI -----------------------------------------------------------------------


def test_cli_animate_and_eval(tmp_path, saved_models, capsys):
    d = saved_models
    args = ["animate", "--mesh", str(d / "mesh.obj"), "--video-dir", str(d / "video"), "--vae-ckpt", str(d / "vae.ckpt"),
            "--rf-ckpt", str(d / "rf.ckpt"), "--steps", "2", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = sorted((tmp_path / "a").glob("*.obj"))
    assert len(a) == 4
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in sorted((tmp_path / "b").glob("*.obj"))]
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["ok"] and out["frames"] == 4

    assert main(["eval", "--data", str(d), "--vae-ckpt", str(d / "vae.ckpt"), "--rf-ckpt", str(d / "rf.ckpt"), "--steps", "2", "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "eval_report.json").read_text())
    assert len(report["clips"]) == 1


def test_cli_errors_are_json(tmp_path, saved_models, capsys):
    d = saved_models
    code = main(["animate", "--mesh", str(d / "mesh.obj"), "--video-dir", str(tmp_path / "missing"), "--vae-ckpt", str(d / "vae.ckpt"),
                 "--rf-ckpt", str(d / "rf.ckpt"), "--out", str(tmp_path / "o")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "MissingFramesError" and err["command"] == "animate"

    code = main(["animate", "--mesh", str(d / "mesh.obj"), "--video-dir", str(d / "video"), "--vae-ckpt", str(d / "rf.ckpt"),
                 "--rf-ckpt", str(d / "rf.ckpt"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "CheckpointError"


def test_cli_data_and_render(tmp_path, capsys):
    cfg = tmp_path / "data.json"
    cfg.write_text(json.dumps({"num_clips": 2, "T": 4, "resolution": 3}))
    assert main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "data")]) == 0
    clips = sorted((tmp_path / "data").glob("*.dmc"))
    assert len(clips) == 2
    assert main(["render", "--clip", str(clips[0]), "--resolution", "16", "--condition-obj", "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r").glob("*.pgm"))) == 4
    assert (tmp_path / "r" / "condition.obj").exists()
    capsys.readouterr()
