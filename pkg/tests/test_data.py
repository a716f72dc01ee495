"""Dataset pipeline: detections, crops, filtering, shards, toy corpus."""

import json

import numpy as np
import pytest

from tinystyle.data import (
    TOY_GEOMETRY,
    DetectionRecord,
    FilterPolicy,
    ToyDatasetSpec,
    bilinear_resize,
    crop_with_margin,
    detect_corpus,
    expanded_region,
    filter_corpus,
    group_detections,
    heuristic_detector,
    load_detections,
    measure_eye_spread,
    measure_head_radius,
    read_labels,
    read_shards,
    synth_toy_dataset,
    toy_attribute_oracles,
    toy_faces,
    write_shards,
)
from tinystyle.errors import (
    CropError,
    DetectionParseError,
    DetectionValidationError,
    ShardCorruptionError,
    ShardFormatError,
)


def _toy_image(seed=0, resolution=32, face_large=True, eyes_wide=True):
    spec = ToyDatasetSpec(resolution=resolution, count=1, seed=seed,
                          p_face_large=1.0 if face_large else 0.0,
                          p_eyes_wide=1.0 if eyes_wide else 0.0)
    images, _ = toy_faces(spec)
    return images[0]


class TestLoadDetections:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        assert load_detections(path) == []

    def test_schema_roundtrip(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id":"a.jpg","box":[100,100,80,80],"conf":0.99}\n')
        recs = load_detections(path)
        assert len(recs) == 1
        assert recs[0].image_id == "a.jpg"
        assert recs[0].box == (100.0, 100.0, 80.0, 80.0)
        assert recs[0].confidence == pytest.approx(0.99)

    def test_negative_width_names_field(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id":"a.jpg","box":[0,0,-5,10],"conf":0.5}\n')
        with pytest.raises(DetectionValidationError, match="width"):
            load_detections(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id":"a","box":[0,0,1,1],"conf":1}\nnot json\n')
        with pytest.raises(DetectionParseError, match="line 2"):
            load_detections(path)

    def test_landmarks_parsed(self, tmp_path):
        path = tmp_path / "d.jsonl"
        lm = [[1, 2], [3, 4], [5, 6], [7, 8], [9, 10]]
        path.write_text(json.dumps({"id": "a", "box": [0, 0, 5, 5],
                                    "conf": 0.5, "landmarks": lm}) + "\n")
        assert load_detections(path)[0].landmarks == tuple(tuple(p) for p in lm)


class TestCropGeometry:
    def test_margin_expansion(self):
        assert expanded_region((100, 100, 80, 80), 50, 400, 300) == (75, 75, 130, 130)

    def test_margin_zero_full_image_is_pure_resize(self, rng):
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        out = crop_with_margin(img, (0, 0, 64, 64), margin=0, out_size=32)
        np.testing.assert_array_equal(out, bilinear_resize(img, 32, 32))

    def test_clamped_at_origin(self):
        assert expanded_region((0, 0, 40, 40), 50, 100, 100) == (0, 0, 65, 65)

    def test_unclamped_width_is_box_plus_margin(self, rng):
        for _ in range(50):
            w, h = int(rng.integers(5, 40)), int(rng.integers(5, 40))
            x, y = int(rng.integers(60, 100)), int(rng.integers(60, 100))
            m = int(rng.integers(0, 40))
            _, _, rw, rh = expanded_region((x, y, w, h), m, 500, 500)
            assert rw == w + m and rh == h + m

    def test_no_intersection_raises(self):
        with pytest.raises(CropError):
            expanded_region((500, 500, 10, 10), 0, 100, 100)

    def test_output_size(self, rng):
        img = rng.integers(0, 256, (100, 120, 3), dtype=np.uint8)
        out = crop_with_margin(img, (10, 10, 30, 40), margin=10, out_size=48)
        assert out.shape == (48, 48, 3)


class TestBilinearResize:
    def test_identity_when_same_size(self, rng):
        img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        np.testing.assert_array_equal(bilinear_resize(img, 16, 16), img)

    def test_constant_image_stays_constant(self):
        img = np.full((10, 10, 3), 130, np.uint8)
        out = bilinear_resize(img, 27, 5)
        assert (out == 130).all()

    def test_2x_upscale_interior_midpoints(self):
        img = np.zeros((1, 2, 1), np.float32)
        img[0, 1, 0] = 100.0
        out = bilinear_resize(img, 1, 4)
        np.testing.assert_allclose(out[0, :, 0], [0.0, 25.0, 75.0, 100.0])


class TestFilterCorpus:
    def _corpus(self, rng, n_detectable, n_missing):
        corpus = []
        detections = {}
        for i in range(n_detectable + n_missing):
            name = f"img{i:03d}"
            corpus.append((name, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)))
            if i < n_detectable:
                detections[name] = [DetectionRecord(name, (10, 10, 30, 30), 0.9)]
        return corpus, detections

    def test_90_of_100_kept(self, rng):
        corpus, detections = self._corpus(rng, 90, 10)
        crops, report = filter_corpus(corpus, detections,
                                      FilterPolicy(out_size=32))
        assert (report.total, report.kept, report.rejected) == (100, 90, 10)
        assert report.reasons["no_detection"] == 10
        assert len(crops) == 90

    def test_empty_corpus(self):
        crops, report = filter_corpus([], {}, FilterPolicy())
        assert (report.total, report.kept, report.rejected) == (0, 0, 0)
        assert crops == []

    def test_decode_error_does_not_abort(self, tmp_path, rng):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        corpus = [("bad.png", bad),
                  ("ok", rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))]
        detections = {"bad.png": [DetectionRecord("bad.png", (1, 1, 10, 10), 0.9)],
                      "ok": [DetectionRecord("ok", (1, 1, 10, 10), 0.9)]}
        crops, report = filter_corpus(corpus, detections, FilterPolicy(out_size=16))
        assert report.kept == 1
        assert report.reasons["decode_error"] == 1

    def test_highest_confidence_box_wins(self, rng):
        img = np.zeros((64, 64, 3), np.uint8)
        img[8:24, 8:24] = 255   # box A region bright
        detections = {"a": [DetectionRecord("a", (40, 40, 16, 16), 0.3),
                            DetectionRecord("a", (8, 8, 16, 16), 0.9)]}
        crops, report = filter_corpus([("a", img)], detections,
                                      FilterPolicy(margin=0, out_size=16))
        assert report.kept == 1
        assert crops[0].mean() > 128  # came from the bright box

    def test_min_confidence_policy(self, rng):
        corpus, detections = self._corpus(rng, 5, 0)
        policy = FilterPolicy(min_confidence=0.95, out_size=16)
        _, report = filter_corpus(corpus, detections, policy)
        assert report.kept == 0
        assert report.reasons["no_detection"] == 5

    def test_conservation_fuzz(self):
        master = np.random.default_rng(1234)
        for _ in range(200):
            rng = np.random.default_rng(int(master.integers(2 ** 31)))
            n = int(rng.integers(0, 12))
            corpus = []
            detections = {}
            for i in range(n):
                name = f"i{i}"
                corpus.append((name, rng.integers(0, 256, (16, 16, 3),
                                                  dtype=np.uint8)))
                if rng.random() < 0.7:
                    x, y = rng.integers(0, 12, 2)
                    w, h = rng.integers(1, 10, 2)
                    detections[name] = [DetectionRecord(
                        name, (float(x), float(y), float(w), float(h)),
                        float(rng.random()))]
            _, report = filter_corpus(corpus, detections,
                                      FilterPolicy(min_confidence=0.25, out_size=8))
            assert report.kept + report.rejected == report.total == n
            assert sum(report.reasons.values()) == report.rejected


class TestShards:
    def test_roundtrip_identity(self, tmp_path, rng):
        imgs = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8) for _ in range(10)]
        write_shards(imgs, tmp_path / "s", shard_capacity=4)
        reader = read_shards(tmp_path / "s")
        assert len(reader) == 10
        for got, want in zip(reader, imgs):
            np.testing.assert_array_equal(got, want)

    def test_file_length_arithmetic(self, tmp_path, rng):
        imgs = [rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
                for _ in range(2)]
        paths = write_shards(imgs, tmp_path / "s")
        assert paths[0].stat().st_size == 23 + 2 * 256 * 256 * 3

    def test_truncated_file_detected(self, tmp_path, rng):
        imgs = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)]
        paths = write_shards(imgs, tmp_path / "s")
        raw = paths[0].read_bytes()
        paths[0].write_bytes(raw[:-1])
        with pytest.raises(ShardCorruptionError, match="length"):
            read_shards(tmp_path / "s")

    def test_magic_mismatch_detected(self, tmp_path, rng):
        imgs = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)]
        paths = write_shards(imgs, tmp_path / "s")
        raw = bytearray(paths[0].read_bytes())
        raw[:8] = b"BADMAGIC"
        paths[0].write_bytes(bytes(raw))
        with pytest.raises(ShardFormatError, match="magic"):
            read_shards(tmp_path / "s")

    def test_parallel_cursors_same_multiset(self, toy_reader):
        it1, it2 = iter(toy_reader), iter(toy_reader)
        a = [next(it1) for _ in range(5)]
        b = [next(it2) for _ in range(5)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_empty_input_still_readable(self, tmp_path):
        write_shards([], tmp_path / "s")
        assert len(read_shards(tmp_path / "s")) == 0

    def test_mixed_shapes_rejected(self, tmp_path, rng):
        imgs = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8),
                rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)]
        with pytest.raises(ShardFormatError, match="shape"):
            write_shards(imgs, tmp_path / "s")


class TestToyDataset:
    def test_zero_count(self, tmp_path):
        paths, labels_path = synth_toy_dataset(
            ToyDatasetSpec(resolution=16, count=0, seed=0), tmp_path / "d")
        assert len(read_shards(tmp_path / "d")) == 0
        assert read_labels(labels_path).shape[0] == 0

    def test_same_seed_identical_bytes(self, tmp_path):
        spec = ToyDatasetSpec(resolution=16, count=20, seed=3)
        pa, _ = synth_toy_dataset(spec, tmp_path / "a")
        pb, _ = synth_toy_dataset(spec, tmp_path / "b")
        assert pa[0].read_bytes() == pb[0].read_bytes()

    def test_forced_large_faces_measurable(self):
        spec = ToyDatasetSpec(resolution=32, count=16, seed=5, p_face_large=1.0)
        images, labels = toy_faces(spec)
        assert (labels[:, 0] == 1).all()
        expected = TOY_GEOMETRY["head_rx_large"]
        for img in images:
            measured = measure_head_radius(img.astype(np.float32) / 255.0)
            assert abs(measured - expected) < 1.5 / 32

    def test_labels_match_geometry_100_percent(self):
        spec = ToyDatasetSpec(resolution=32, count=64, seed=9)
        images, labels = toy_faces(spec)
        oracles = toy_attribute_oracles()
        chw = (images.astype(np.float32) / 127.5 - 1.0).transpose(0, 3, 1, 2)
        for j, oracle in enumerate(oracles):
            predicted, _ = oracle(chw)
            np.testing.assert_array_equal(predicted, labels[:, j])

    def test_label_file_roundtrip(self, tmp_path):
        spec = ToyDatasetSpec(resolution=16, count=12, seed=2)
        _, labels_path = synth_toy_dataset(spec, tmp_path / "d")
        _, labels = toy_faces(spec)
        np.testing.assert_array_equal(read_labels(labels_path), labels)

    def test_resolution_validation(self):
        with pytest.raises(ValueError):
            ToyDatasetSpec(resolution=12, count=1)


class TestHeuristicDetector:
    def test_black_image_empty(self):
        assert heuristic_detector(np.zeros((32, 32, 3), np.uint8)) == []

    def test_uniform_noise_below_threshold_empty(self, rng):
        noise = (rng.uniform(0.40, 0.50, (32, 32, 3)) * 255).astype(np.uint8)
        assert heuristic_detector(noise) == []

    def test_toy_face_box_within_2px(self):
        img = _toy_image(seed=1, resolution=32, face_large=True)
        recs = heuristic_detector(img, "x")
        assert len(recs) == 1
        x, y, w, h = recs[0].box
        g = TOY_GEOMETRY
        rx = g["head_rx_large"] * 32
        ry = min(rx * g["head_ry_factor"], 0.46 * 32)
        cx = cy = (32 - 1) / 2
        yy, xx = np.mgrid[0:32, 0:32]
        head = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        hy, hx = np.nonzero(head)
        true_box = (hx.min(), hy.min(), hx.max() - hx.min() + 1,
                    hy.max() - hy.min() + 1)
        for got, want in zip((x, y, w, h), true_box):
            assert abs(got - want) <= 2

    def test_confidence_is_fill_ratio(self):
        img = _toy_image(seed=2, resolution=32)
        rec = heuristic_detector(img)[0]
        assert 0.0 < rec.confidence <= 1.0

    def test_detect_corpus_end_to_end(self, rng):
        corpus = [("face", _toy_image(seed=3)),
                  ("blank", np.zeros((32, 32, 3), np.uint8))]
        detections = detect_corpus(corpus)
        assert set(detections) == {"face"}


class TestPipelineDeterminism:
    def test_same_inputs_same_shards_and_report(self, tmp_path, rng):
        imgs = [_toy_image(seed=s) for s in range(6)]
        corpus = [(f"i{s}", img) for s, img in enumerate(imgs)]
        detections = detect_corpus(corpus)
        out = {}
        for tag in ("a", "b"):
            crops, report = filter_corpus(corpus, detections,
                                          FilterPolicy(margin=10, out_size=16))
            paths = write_shards(crops, tmp_path / tag)
            out[tag] = (paths[0].read_bytes(), report.as_dict())
        assert out["a"] == out["b"]


class TestGroupDetections:
    def test_grouping(self):
        recs = [DetectionRecord("a", (0, 0, 1, 1), 0.5),
                DetectionRecord("b", (0, 0, 1, 1), 0.5),
                DetectionRecord("a", (1, 1, 2, 2), 0.7)]
        table = group_detections(recs)
        assert len(table["a"]) == 2 and len(table["b"]) == 1


class TestEyeSpreadMeasure:
    def test_wide_vs_narrow_separable(self):
        wide = _toy_image(seed=4, face_large=False, eyes_wide=True)
        narrow = _toy_image(seed=4, face_large=True, eyes_wide=False)
        sw = measure_eye_spread(wide.astype(np.float32) / 255.0)
        sn = measure_eye_spread(narrow.astype(np.float32) / 255.0)
        assert sw > sn
