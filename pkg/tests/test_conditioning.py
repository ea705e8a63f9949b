import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmesh.conditioning import (
    PATCH_PROVIDER,
    Camera,
    MissingFramesError,
    PatchTokenizer,
    rasterize_silhouette,
    read_pgm_video,
    render_sequence,
    spatiotemporal_encoding,
    token_count,
    tokenize_video,
    write_pgm_video,
)


def barycentric_oracle(tri_uv, r):
    """Per-pixel-center sign test, one pixel at a time (strict interior only)."""
    (x0, y0), (x1, y1), (x2, y2) = tri_uv
    img = np.zeros((r, r), np.uint8)
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    for i in range(r):
        for j in range(r):
            px, py = j + 0.5, i + 0.5
            l1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) / det
            l2 = ((x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)) / det
            l0 = 1 - l1 - l2
            img[i, j] = l0 > 0 and l1 > 0 and l2 > 0
    return img


def test_zero_faces_gives_empty_frame(rng):
    cam = Camera(resolution=16)
    img = rasterize_silhouette(rng.normal(size=(5, 3)), np.zeros((0, 3), int), cam)
    assert img.shape == (16, 16) and not img.any()


def test_padded_faces_are_not_drawn():
    cam = Camera(resolution=16)
    v = np.array([[-1.0, -1, 0], [1, -1, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2]])
    assert not rasterize_silhouette(v, faces, cam, real_face_count=0).any()
    assert not rasterize_silhouette(v, np.array([[2, 2, 2]]), cam).any()


def test_full_cover():
    cam = Camera(resolution=32)
    v = np.array([[-2.0, -2, 0], [2, -2, 0], [2, 2, 0], [-2, 2, 0]])
    img = rasterize_silhouette(v, [[0, 1, 2], [0, 2, 3]], cam)
    assert img.all()


def test_random_triangle_matches_oracle():
    rng = np.random.default_rng(5)
    cam = Camera(resolution=48)
    for _ in range(5):
        v = rng.uniform(-1, 1, size=(3, 3))
        img = rasterize_silhouette(v, [[0, 1, 2]], cam)
        oracle = barycentric_oracle(cam.project(v), 48)
        assert np.array_equal(img, oracle)


def test_shared_edge_pixels_drawn_once():
    # grid-aligned square split on its diagonal: every center on the diagonal
    # belongs to exactly one of the two triangles
    cam = Camera(resolution=20, margin=0.0)
    k = 0.5 * 20
    uv = np.array([[2.5, 2.5], [12.5, 2.5], [12.5, 12.5], [2.5, 12.5]])
    v = np.stack([(uv[:, 0] - 10) / k, (10 - uv[:, 1]) / k, np.zeros(4)], axis=1)
    a = rasterize_silhouette(v, [[0, 1, 2]], cam)
    b = rasterize_silhouette(v, [[0, 2, 3]], cam)
    both = rasterize_silhouette(v, [[0, 1, 2], [0, 2, 3]], cam)
    assert not (a & b).any()
    assert np.array_equal(a | b, both)
    assert both.sum() == 10 * 10


def test_winding_does_not_matter(rng):
    cam = Camera(resolution=24)
    v = rng.uniform(-1, 1, size=(3, 3))
    assert np.array_equal(rasterize_silhouette(v, [[0, 1, 2]], cam), rasterize_silhouette(v, [[0, 2, 1]], cam))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_outside_view_is_empty_and_output_binary(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(resolution=16)
    v = rng.uniform(-1, 1, size=(6, 3))
    faces = rng.integers(0, 6, size=(4, 3))
    img = rasterize_silhouette(v, faces, cam)
    assert set(np.unique(img)) <= {0, 1}
    assert np.array_equal(img, rasterize_silhouette(v, faces, cam))
    assert not rasterize_silhouette(v + [5, 0, 0], faces, cam).any()


def test_camera_maps_unit_box_inside_margin():
    cam = Camera(resolution=256)
    uv = cam.project(np.array([[-1.0, 1, 0], [1, -1, 0]]))
    assert np.allclose(uv, [[12.8, 12.8], [243.2, 243.2]])


def test_pgm_round_trip(tmp_path, rng):
    video = (rng.random((3, 5, 7)) > 0.5).astype(np.uint8)
    paths = write_pgm_video(video, tmp_path)
    assert [p.name for p in paths] == ["frame_0000.pgm", "frame_0001.pgm", "frame_0002.pgm"]
    assert paths[0].read_bytes().startswith(b"P5\n7 5\n255\n")
    assert set(paths[0].read_bytes()[len(b"P5\n7 5\n255\n") :]) <= {0, 255}
    assert np.array_equal(read_pgm_video(tmp_path), video)


def test_pgm_missing_frames(tmp_path, rng):
    write_pgm_video(np.ones((3, 4, 4), np.uint8), tmp_path)
    (tmp_path / "frame_0001.pgm").unlink()
    with pytest.raises(MissingFramesError):
        read_pgm_video(tmp_path)
    with pytest.raises(MissingFramesError):
        read_pgm_video(tmp_path / "empty")


def test_pgm_mixed_resolution(tmp_path):
    write_pgm_video(np.ones((1, 4, 4), np.uint8), tmp_path)
    (tmp_path / "frame_0001.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ValueError):
        read_pgm_video(tmp_path)


# -- tokenizer -------------------------------------------------------------


def test_token_count_arithmetic():
    assert token_count(64, 256, 4, 32) == 16 * 8 * 8 == 1024
    tok = PatchTokenizer(64, 256, 4, 32, 128, np.random.default_rng(0))
    assert tok.num_tokens == 1024


def test_full_size_tokenizer_shape():
    tok = PatchTokenizer(64, 256, 4, 32, 128, np.random.default_rng(0))
    out = tok(np.zeros((64, 256, 256)))
    assert out.tokens.shape == (1024, 128)
    assert out.provider == PATCH_PROVIDER


def test_zero_video_tokens_are_position_plus_bias():
    tok = PatchTokenizer(8, 32, 4, 8, 24, np.random.default_rng(0))
    tok.proj.bias.data[:] = np.random.default_rng(1).normal(size=24)
    out = tokenize_video(np.zeros((8, 32, 32)), tok).tokens.data
    assert np.array_equal(out, tok.pos + tok.proj.bias.data)


def test_tokens_deterministic(rng):
    tok = PatchTokenizer(8, 32, 4, 8, 24, np.random.default_rng(0))
    video = (rng.random((8, 32, 32)) > 0.5).astype(float)
    assert tok(video).tokens.data.tobytes() == tok(video).tokens.data.tobytes()


def test_patch_order_matches_explicit_loop(rng):
    tok = PatchTokenizer(4, 8, 2, 4, 6, np.random.default_rng(0))
    video = rng.normal(size=(4, 8, 8))
    expect = []
    for t in range(2):
        for y in range(2):
            for x in range(2):
                expect.append(video[2 * t : 2 * t + 2, 4 * y : 4 * y + 4, 4 * x : 4 * x + 4].ravel())
    assert np.array_equal(tok.patches(video), np.array(expect))


def test_tokenizer_divisibility_errors(rng):
    with pytest.raises(ValueError):
        PatchTokenizer(10, 32, 4, 8, 24, rng)
    tok = PatchTokenizer(8, 32, 4, 8, 24, rng)
    with pytest.raises(ValueError):
        tok(np.zeros((8, 30, 30)))
    with pytest.raises(ValueError):
        tok(np.zeros((4, 32, 32)))


def test_position_code_distinct_and_bounded():
    pos = spatiotemporal_encoding((4, 3, 5), 24)
    assert pos.shape == (60, 24)
    assert len({row.tobytes() for row in pos}) == 60
    assert np.abs(pos).max() <= 1.0


def test_render_sequence_shape(rng):
    frames = rng.uniform(-1, 1, size=(3, 5, 3))
    video = render_sequence(frames, [[0, 1, 2], [2, 3, 4]], Camera(resolution=16))
    assert video.shape == (3, 16, 16) and video.dtype == np.uint8
