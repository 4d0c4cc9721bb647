import json

import numpy as np
import pytest

from wmr.errors import ConfigurationError, InputError, ParseError
from wmr.regions import Box
from wmr.synth import (CLASS_FACTORS, Manifest, SynthConfig, SynthVideo, generate_dataset, generate_video,
                       load_video, read_manifest, read_pgm, synthetic_detections, write_manifest, write_pgm)

QUIET = SynthConfig(noise_sigma=0.0)


def crop(frame, box, pad=0):
    return frame[max(box.y_min - pad, 0):box.y_max + pad, max(box.x_min - pad, 0):box.x_max + pad]


@pytest.mark.parametrize("pair", [(0, 1), (2, 3)])
@pytest.mark.parametrize("seed", range(5))
def test_paired_classes_share_actor_crops(pair, seed):
    a, boxes_a = generate_video(pair[0], QUIET, seed)
    b, boxes_b = generate_video(pair[1], QUIET, seed)
    assert boxes_a == boxes_b
    for fa, fb, box in zip(a.frames, b.frames, boxes_a):
        assert np.array_equal(crop(fa, box), crop(fb, box))
        # the clear margin is also texture-free, so a wider crop still matches
        assert np.array_equal(crop(fa, box, QUIET.clear_margin), crop(fb, box, QUIET.clear_margin))


def test_backgrounds_differ_between_paired_classes():
    a, _ = generate_video(0, QUIET, 3)
    b, _ = generate_video(1, QUIET, 3)
    assert not np.array_equal(a.frames[0], b.frames[0])


@pytest.mark.parametrize("class_id", range(4))
def test_ground_truth_box_is_the_actor(class_id):
    video, boxes = generate_video(class_id, QUIET, 11)
    for frame, box in zip(video.frames, boxes):
        assert box.width == box.height == QUIET.actor_size
        assert np.all(crop(frame, box) == 235)
        assert np.count_nonzero(frame == 235) == QUIET.actor_size ** 2


@pytest.mark.parametrize("class_id", range(4))
def test_motion_steps_are_bounded(class_id):
    for seed in range(10):
        _, boxes = generate_video(class_id, SynthConfig(), seed)
        steps = [max(abs(b.x_min - a.x_min), abs(b.y_min - a.y_min)) for a, b in zip(boxes, boxes[1:])]
        assert max(steps) <= 3 and max(steps) >= 1


def test_generation_is_deterministic():
    a, ba = generate_video(2, SynthConfig(), 42)
    b, bb = generate_video(2, SynthConfig(), 42)
    assert ba == bb
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert a.frames[0].dtype == np.uint8 and len(a.frames) == 16 and a.frames[0].shape == (64, 64)


def test_invalid_class_and_config():
    with pytest.raises(InputError):
        generate_video(4)
    with pytest.raises(ConfigurationError):
        SynthConfig(frames_per_video=10)
    with pytest.raises(ConfigurationError):
        SynthConfig(actor_size=40)


def test_class_factors_cover_both_axes():
    motions = {m for m, _ in CLASS_FACTORS.values()}
    textures = {t for _, t in CLASS_FACTORS.values()}
    assert len(motions) == 2 and len(textures) == 2 and len(set(CLASS_FACTORS.values())) == 4


def test_dataset_is_balanced_and_disjoint():
    cfg = SynthConfig(train_videos=8, test_videos=4)
    data = generate_dataset(cfg)
    train = [d for d in data if d.split == "train"]
    test = [d for d in data if d.split == "test"]
    assert [d.sample.label for d in train] == [0, 1, 2, 3] * 2
    assert len(test) == 4
    assert not {d.sample.id for d in train} & {d.sample.id for d in test}


def test_synthetic_detections_favor_the_actor():
    cfg = SynthConfig()
    _, boxes = generate_video(0, cfg, 5)
    dets = synthetic_detections(boxes, cfg, 5)
    for fid, box in enumerate(boxes):
        best = max(dets[fid], key=lambda d: d.score)
        assert 0.8 <= best.score <= 1.0
        assert all(abs(p - q) <= cfg.detection_jitter for p, q in zip(best.box.as_tuple(), box.as_tuple()))


def test_pgm_round_trip(tmp_path):
    frame = np.random.default_rng(0).integers(0, 256, (7, 9), dtype=np.uint8)
    write_pgm(tmp_path / "f.pgm", frame)
    assert (tmp_path / "f.pgm").read_bytes()[:2] == b"P5"
    assert np.array_equal(read_pgm(tmp_path / "f.pgm"), frame)


def test_manifest_round_trip(tmp_path):
    cfg = SynthConfig(train_videos=2, test_videos=1)
    data = generate_dataset(cfg)
    written = write_manifest(data, tmp_path / "manifest.json", cfg)
    back = read_manifest(tmp_path / "manifest.json")
    assert back == written
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert set(doc[0]) >= {"path", "label", "split", "boxes"}
    assert doc[0]["boxes"][0] == [0, *data[0].boxes[0].as_tuple()]
    video = load_video(back, back.entries[2])
    assert all(np.array_equal(a, b) for a, b in zip(video.frames, data[2].sample.frames))
    assert (tmp_path / back.entries[0].path / "detections.txt").exists()


def test_empty_manifest(tmp_path):
    written = write_manifest([], tmp_path / "m.json")
    assert read_manifest(tmp_path / "m.json") == written == Manifest([], str(tmp_path))


def test_missing_frame_names_the_path(tmp_path):
    cfg = SynthConfig(train_videos=1, test_videos=0)
    m = write_manifest(generate_dataset(cfg), tmp_path / "m.json")
    missing = m.entries[0].frame_path(m.root, 5)
    missing.unlink()
    with pytest.raises(ParseError, match="frame_005.pgm"):
        read_manifest(tmp_path / "m.json")


def test_malformed_manifest_entries(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('[{"path": "x", "label": 0}]')
    with pytest.raises(ParseError, match=r"\[0\]"):
        read_manifest(p)
    p.write_text('[{"path": "x", "label": 0, "split": "train", "boxes": [[0, 5, 5, 2, 2]]}]')
    with pytest.raises(ParseError):
        read_manifest(p)
    p.write_text("{not json")
    with pytest.raises(ParseError):
        read_manifest(p)
    with pytest.raises(ParseError):
        read_manifest(tmp_path / "absent.json")
