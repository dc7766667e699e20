import numpy as np
import pytest

from direcformer import dft
from direcformer.synth import (DatasetSpec, VideoClip, class_index, class_name, clip_start,
                               crop_views, generate_clip, generate_dataset, load_batch,
                               opposite_class, read_manifest, render, velocity)


def test_determinism():
    spec = DatasetSpec()
    a, b = generate_clip(spec, 17), generate_clip(spec, 17)
    assert a.pixels.tobytes() == b.pixels.tobytes() and a.label == b.label
    assert a.pixels.shape == (8, 32, 32, 1) and a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_square_moves_with_class_velocity():
    spec = DatasetSpec(noise=0.0)
    label = class_index("down", "fast")
    y0, x0 = 3, 30
    px = render(spec, label, y0, x0)[..., 0]
    for t in range(spec.T):
        ys, xs = np.nonzero(px[t])
        assert set(ys) == {(y0 + 2 * t + i) % 32 for i in range(4)}
        assert set(xs) == {(x0 + i) % 32 for i in range(4)}


def test_reversal_flips_label():
    spec = DatasetSpec(noise=0.0)
    for label in range(spec.classes):
        y0, x0 = 5, 9
        clip = render(spec, label, y0, x0)
        dy, dx = velocity(label)
        # the reversed clip starts where the original ends
        end = ((y0 + dy * (spec.T - 1)) % spec.H, (x0 + dx * (spec.T - 1)) % spec.W)
        flipped = render(spec, opposite_class(label), *end)
        assert np.array_equal(clip[::-1], flipped)
        assert class_name(opposite_class(label)).split("-")[1] == class_name(label).split("-")[1]


def test_middle_frame_is_ambiguous():
    spec = DatasetSpec(noise=0.0)
    t = -(-spec.T // 2)  # ceil(T / 2), 1-based -> index t - 1
    for cid in range(16):
        clip = generate_clip(spec, cid)
        label = clip.label
        y0, x0 = clip_start(spec, cid)
        dy, dx = velocity(label)
        # the opposite-direction clip through the same middle position
        ym, xm = y0 + dy * (t - 1), x0 + dx * (t - 1)
        other = render(spec, opposite_class(label), (ym + dy * (t - 1)) % spec.H,
                       (xm + dx * (t - 1)) % spec.W)
        assert np.array_equal(other[t - 1], clip.pixels[t - 1])


def test_background_modes():
    assert generate_clip(DatasetSpec(background="texture", noise=0), 3).pixels.min() > 0
    with pytest.raises(ValueError):
        generate_clip(DatasetSpec(background="stripes"), 0)


def test_split_counts_and_roundtrip(tmp_path):
    spec = DatasetSpec(n_train=800, n_val=100, n_test=100, H=16, W=16)
    m = generate_dataset(spec, tmp_path)
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [800, 100, 100]
    ids = [set(r.clip_id for r in m.split(s)) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[1] & ids[2] or ids[0] & ids[2])
    back = read_manifest(tmp_path / "manifest.txt")
    assert back.rows == m.rows and back.spec == spec
    assert (tmp_path / "manifest.txt").read_text().startswith("DIRECTEDMOTION v1\n")
    clips = load_batch(back, "val", [0, 5])
    for c in clips:
        assert c.pixels.tobytes() == generate_clip(spec, c.clip_id).pixels.tobytes()
    with pytest.raises(IndexError):
        load_batch(back, "val", [100])


def test_crops():
    px = np.arange(4 * 6 * 6, dtype=np.float32).reshape(1, 4, 6, 6, 1)[0]
    clip = VideoClip(px, 0)
    (c,) = crop_views(clip, 4, "center")
    assert np.array_equal(c.pixels, px[:, 1:5, 1:5])
    tl, ce, br = crop_views(clip, 4, "three-crop")
    assert np.array_equal(tl.pixels, px[:, :4, :4]) and np.array_equal(br.pixels, px[:, 2:, 2:])
    with pytest.raises(ValueError):
        crop_views(clip, 8)


def test_dft_roundtrip_and_errors(tmp_path):
    for dtype in (np.float32, np.float64):
        a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
        dft.save(tmp_path / "a.dft", a)
        b = dft.load(tmp_path / "a.dft")
        assert b.dtype == dtype and b.tobytes() == a.tobytes()
    raw = dft.encode(np.ones(3))
    assert raw[:4] == b"DFT1" and raw[4:8] == (1).to_bytes(4, "little")
    assert raw[16] == 8 and len(raw) == 17 + 24
    with pytest.raises(dft.DFTFormatError):
        dft.decode(b"XXXX" + raw[4:])
    with pytest.raises(dft.DFTFormatError):
        dft.decode(raw[:-1])
    (tmp_path / "bad.dft").write_bytes(raw[:10])
    with pytest.raises(dft.DFTFormatError, match="bad.dft"):
        dft.load(tmp_path / "bad.dft")
