"""pipeline: manifests, synthetic cameras, scoring and reports."""

import numpy as np
import pytest

from camtrace.errors import EmptyManifest, InvalidConfig, InvalidSpec, MissingPrediction
from camtrace.imagecore import RasterImage, save_png
from camtrace.pipeline.manifest import ManifestRow, load_manifest, save_manifest
from camtrace.pipeline.scoring import (
    ScoreReport,
    load_report_json,
    save_report_json,
    score,
    weighted_score,
    write_report,
)
from camtrace.pipeline.synthcam import (
    SyntheticCameraSpec,
    default_camera_specs,
    demosaic,
    generate_synthetic_dataset,
    mosaic,
    render_scene,
    simulate_camera,
    _channel_masks,
)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        img_path = tmp_path / "a.png"
        save_png(RasterImage(np.zeros((8, 8, 3), dtype=np.uint8)), img_path)
        rows = [
            ManifestRow(path=str(img_path), source_id="a", label=1,
                        device_id="cam", manipulation="jpeg", x0=0, y0=0, size=64,
                        score=0.5),
        ]
        mpath = save_manifest(rows, tmp_path / "manifest.jsonl")
        loaded = load_manifest(mpath)
        assert len(loaded) == 1
        got = loaded[0]
        assert got.source_id == "a"
        assert got.label == 1
        assert got.manipulation == "jpeg"
        assert got.score == 0.5
        assert got.path == str(img_path)

    def test_relative_paths_stored(self, tmp_path):
        img_path = tmp_path / "sub" / "a.png"
        save_png(RasterImage(np.zeros((8, 8, 3), dtype=np.uint8)), img_path)
        save_manifest([ManifestRow(str(img_path), "a", 0)], tmp_path / "m.jsonl")
        text = (tmp_path / "m.jsonl").read_text()
        assert str(tmp_path) not in text  # relocatable

    def test_missing_file_rejected(self, tmp_path):
        save_manifest([ManifestRow("nope.png", "a", 0)], tmp_path / "m.jsonl")
        with pytest.raises(InvalidConfig):
            load_manifest(tmp_path / "m.jsonl")
        loaded = load_manifest(tmp_path / "m.jsonl", check_paths=False)
        assert loaded[0].source_id == "a"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(EmptyManifest):
            load_manifest(tmp_path / "absent.jsonl")

    def test_label_class_check(self, tmp_path):
        save_manifest([ManifestRow("x.png", "a", 7)], tmp_path / "m.jsonl")
        with pytest.raises(InvalidConfig):
            load_manifest(tmp_path / "m.jsonl", check_paths=False, classes={0, 1})


class TestSyntheticCamera:
    def test_masks_partition_image(self):
        for pattern in ("RGGB", "GRBG", "GBRG", "BGGR"):
            masks = _channel_masks(pattern, 8, 8)
            assert np.array_equal(masks.sum(axis=0), np.ones((8, 8)))
            assert masks[1].sum() == 32  # green covers half

    def test_constant_scene_reproduced(self):
        scene = np.full((16, 16, 3), 0.5)
        for pattern in ("RGGB", "BGGR"):
            raw = mosaic(scene, pattern)
            for kind in ("bilinear", "smooth_hue", "nearest"):
                rgb = demosaic(raw, pattern, kind)
                assert np.allclose(rgb, 0.5, atol=1e-6), (pattern, kind)

    def test_spec_validation(self):
        with pytest.raises(InvalidSpec):
            SyntheticCameraSpec("x", "RGBG", "bilinear", 1.0, 90)
        with pytest.raises(InvalidSpec):
            SyntheticCameraSpec("x", "RGGB", "lanczos", 1.0, 90)
        with pytest.raises(InvalidSpec):
            SyntheticCameraSpec("x", "RGGB", "bilinear", -1.0, 90)
        with pytest.raises(InvalidSpec):
            SyntheticCameraSpec("x", "RGGB", "bilinear", 1.0, 0)

    def test_dataset_validation(self, tmp_path):
        spec = SyntheticCameraSpec("a", "RGGB", "bilinear", 1.0, 90)
        with pytest.raises(InvalidSpec):
            generate_synthetic_dataset([spec], 1, 64, tmp_path)
        dup = SyntheticCameraSpec("a", "GRBG", "bilinear", 2.0, 80)
        with pytest.raises(InvalidSpec):
            generate_synthetic_dataset([spec, dup], 1, 64, tmp_path)
        same_trace = SyntheticCameraSpec("b", "RGGB", "bilinear", 1.0, 90, seed=9)
        with pytest.raises(InvalidSpec):
            generate_synthetic_dataset([spec, same_trace], 1, 64, tmp_path)

    def test_zero_images_no_error(self, tmp_path):
        rows = generate_synthetic_dataset(default_camera_specs(2), 0, 64, tmp_path)
        assert rows == []
        assert (tmp_path / "manifest.jsonl").exists()

    def test_deterministic_under_seed(self, tmp_path):
        specs = default_camera_specs(2)
        rows1 = generate_synthetic_dataset(specs, 2, 64, tmp_path / "a", seed=5)
        rows2 = generate_synthetic_dataset(specs, 2, 64, tmp_path / "b", seed=5)
        for r1, r2 in zip(rows1, rows2):
            b1 = open(r1.path, "rb").read()
            b2 = open(r2.path, "rb").read()
            assert b1 == b2

    def test_demosaic_kind_changes_interchannel_gradient(self):
        # same scene and capture chain, demosaic kernel swapped
        rng = np.random.default_rng(3)
        scene = render_scene(rng, 64)

        def stat(kind):
            spec = SyntheticCameraSpec("m", "RGGB", kind, 0.0, 95)
            img = simulate_camera(scene, spec, np.random.default_rng(0))
            arr = img.pixels.astype(np.float64)
            rg = arr[:, :, 0] - arr[:, :, 1]
            return np.abs(np.diff(rg, axis=1)).mean()

        values = {kind: stat(kind) for kind in ("bilinear", "smooth_hue", "nearest")}
        assert abs(values["bilinear"] - values["nearest"]) > 0
        assert abs(values["bilinear"] - values["smooth_hue"]) > 0

    def test_native_quality_changes_output(self):
        rng = np.random.default_rng(4)
        scene = render_scene(rng, 64)
        a = simulate_camera(scene, SyntheticCameraSpec("m", "RGGB", "bilinear", 0.0, 95),
                            np.random.default_rng(0))
        b = simulate_camera(scene, SyntheticCameraSpec("m", "RGGB", "bilinear", 0.0, 70),
                            np.random.default_rng(0))
        assert a != b


def truth_rows(n_unaltered, n_manip, label=0):
    rows = []
    for i in range(n_unaltered):
        rows.append(ManifestRow(f"u{i}.png", f"u{i}", label, manipulation="unaltered"))
    tags = ["jpeg", "gamma", "resized"]
    for i in range(n_manip):
        rows.append(ManifestRow(f"m{i}.png", f"m{i}", label, manipulation=tags[i % 3]))
    return rows


class TestScoring:
    def test_all_unaltered_correct_manipulated_wrong(self):
        rows = truth_rows(10, 10, label=0)
        preds = {r.source_id: (0 if r.manipulation == "unaltered" else 1) for r in rows}
        report = score(preds, rows, num_classes=2)
        assert report.weighted_score == pytest.approx(0.7, abs=1e-15)

    def test_all_correct(self):
        rows = truth_rows(7, 9)
        preds = {r.source_id: r.label for r in rows}
        assert score(preds, rows, num_classes=2).weighted_score == pytest.approx(1.0)

    def test_table3_component_accuracies(self):
        # the published full-pipeline row: 0.6933/0.70 and 0.2904/0.30
        assert weighted_score(0.6933 / 0.7, 0.2904 / 0.3) == pytest.approx(0.9837, abs=1e-12)

    def test_weighted_identity_random_fixtures(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            u, m = rng.uniform(0, 1, 2)
            report = ScoreReport(u, m, weighted_score(u, m), np.zeros((2, 2)), ["a", "b"])
            assert report.weighted_score == 0.7 * report.acc_unaltered + 0.3 * report.acc_manipulated

    def test_confusion_row_sums_match_truth_counts(self):
        rng = np.random.default_rng(6)
        rows = []
        preds = {}
        for i in range(60):
            label = int(rng.integers(0, 3))
            tag = "unaltered" if rng.random() < 0.5 else "jpeg"
            rows.append(ManifestRow(f"p{i}.png", f"p{i}", label, manipulation=tag))
            preds[f"p{i}"] = int(rng.integers(0, 3))
        report = score(preds, rows, num_classes=3)
        truth_counts = np.bincount([r.label for r in rows], minlength=3)
        pred_counts = np.bincount(list(preds.values()), minlength=3)
        assert np.array_equal(report.confusion.sum(axis=1), truth_counts)
        assert np.array_equal(report.confusion.sum(axis=0), pred_counts)

    def test_missing_prediction(self):
        rows = truth_rows(2, 0)
        with pytest.raises(MissingPrediction):
            score({"u0": 0}, rows, num_classes=2)

    def test_per_manip_accuracy(self):
        rows = truth_rows(4, 6, label=0)
        preds = {r.source_id: (0 if r.manipulation in ("unaltered", "jpeg") else 1) for r in rows}
        report = score(preds, rows, num_classes=2)
        assert report.per_manip_accuracy["unaltered"] == 1.0
        assert report.per_manip_accuracy["jpeg"] == 1.0
        assert report.per_manip_accuracy["gamma"] == 0.0

    def test_empty_class_set_rejected_at_construction(self):
        with pytest.raises(InvalidConfig):
            ScoreReport(0.5, 0.5, 0.5, np.zeros((0, 0)), [])

    def test_report_files(self, tmp_path):
        rows = truth_rows(5, 5)
        preds = {r.source_id: r.label for r in rows}
        report = score(preds, rows, num_classes=2, class_names=["cam_a", "cam_b"])
        csv_path, txt_path = write_report(report, tmp_path)
        csv_text = csv_path.read_text()
        assert "cam_a" in csv_text
        assert "Weighted score: 100.00%" in txt_path.read_text()
        # deterministic for a fixed report
        again = write_report(report, tmp_path)
        assert again[0].read_text() == csv_text

    def test_report_json_roundtrip(self, tmp_path):
        rows = truth_rows(5, 5)
        preds = {r.source_id: r.label for r in rows}
        report = score(preds, rows, num_classes=2)
        path = save_report_json(report, tmp_path / "score.json")
        loaded = load_report_json(path)
        assert loaded.weighted_score == report.weighted_score
        assert np.array_equal(loaded.confusion, report.confusion)
