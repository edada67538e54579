"""Synthetic scene generation, pixmap round-trips, dataset manifests, and the
seeded feature lift."""
import numpy as np
import pytest

from ocrseg.data import (COORD_CHANNELS, PALETTE, SyntheticScene,
                         generate_scene, generate_scenes, lift_weights,
                         load_dataset, read_pgm, read_ppm, scene_features,
                         scene_label_map, write_dataset, write_pgm, write_ppm)
from ocrseg.errors import DataError


def replay_scene(seed, grid, num_classes, noise, jitter, smin, smax):
    """Re-run the generator's draw sequence and rasterize with scalar loops:
    shapes drawn in order, each pixel taking the latest covering shape."""
    rng = np.random.default_rng(seed)
    colors = PALETTE[:num_classes] + rng.normal(0.0, jitter, (num_classes, 3))
    count = int(rng.integers(smin, smax + 1))
    shapes = []
    for _ in range(count):
        cls = int(rng.integers(1, num_classes))
        kind = int(rng.integers(0, 2))
        size = int(rng.integers(max(4, grid // 5), max(6, grid // 2)))
        cy = int(rng.integers(0, grid))
        cx = int(rng.integers(0, grid))
        shapes.append((cls, kind, size, cy, cx))
    labels = np.zeros((grid, grid), dtype=np.uint8)
    for y in range(grid):
        for x in range(grid):
            for cls, kind, size, cy, cx in shapes:
                half = size // 2
                if kind == 0:
                    hit = abs(y - cy) <= half and abs(x - cx) <= half
                else:
                    hit = (y - cy) ** 2 + (x - cx) ** 2 <= half * half
                if hit:
                    labels[y, x] = cls
    pixel_noise = rng.normal(0.0, noise, (grid, grid, 3))
    image = np.clip(np.rint(colors[labels] + pixel_noise), 0, 255).astype(np.uint8)
    return image, labels


class TestGenerateScene:
    def test_matches_rasterization_replay(self):
        for seed in (11, 12, 13):
            scene = generate_scene(np.random.default_rng(seed), 16, 4,
                                   noise=20.0, jitter=5.0,
                                   shapes_min=2, shapes_max=4)
            image, labels = replay_scene(seed, 16, 4, 20.0, 5.0, 2, 4)
            assert np.array_equal(scene.labels, labels)
            assert np.array_equal(scene.image, image)

    def test_two_classes_two_label_values(self, rng):
        scene = generate_scene(rng, 16, 2)
        values = set(np.unique(scene.labels))
        assert values <= {0, 1}

    def test_background_is_class_zero(self, rng):
        # a scene can be fully covered, so look across several draws
        saw_background = False
        for _ in range(10):
            scene = generate_scene(rng, 16, 4)
            if (scene.labels == 0).any():
                saw_background = True
        assert saw_background

    def test_labels_stay_in_range(self, rng):
        for _ in range(10):
            scene = generate_scene(rng, 12, 5)
            assert scene.labels.max() < 5

    def test_ignore_fraction_marks_pixels(self, rng):
        scene = generate_scene(rng, 16, 3, ignore_fraction=0.4)
        ignored = int((scene.labels == 255).sum())
        assert 0 < ignored < 16 * 16
        clean = generate_scene(rng, 16, 3, ignore_fraction=0.0)
        assert not (clean.labels == 255).any()

    def test_validation(self, rng):
        with pytest.raises(DataError):
            generate_scene(rng, 16, 1)
        with pytest.raises(DataError):
            generate_scene(rng, 16, 9)
        with pytest.raises(DataError):
            generate_scene(rng, 7, 3)

    def test_batch_determinism(self):
        a = generate_scenes(5, 4, 12, 3)
        b = generate_scenes(5, 4, 12, 3)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.labels, sb.labels)
        other = generate_scenes(5, 4, 12, 3, stream=1)
        assert any(not np.array_equal(sa.labels, so.labels)
                   for sa, so in zip(a, other))


class TestSyntheticScene:
    def test_shape_and_dtype_checks(self):
        good_img = np.zeros((4, 4, 3), dtype=np.uint8)
        good_lab = np.zeros((4, 4), dtype=np.uint8)
        SyntheticScene(good_img, good_lab)
        with pytest.raises(DataError):
            SyntheticScene(np.zeros((4, 4), dtype=np.uint8), good_lab)
        with pytest.raises(DataError):
            SyntheticScene(good_img.astype(np.float64), good_lab)
        with pytest.raises(DataError):
            SyntheticScene(good_img, np.zeros((5, 4), dtype=np.uint8))


class TestPixmapIO:
    def test_ppm_round_trip_exact(self, rng, tmp_path):
        image = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        path = str(tmp_path / "scene.ppm")
        write_ppm(path, image)
        assert np.array_equal(read_ppm(path), image)

    def test_pgm_round_trip_exact(self, rng, tmp_path):
        labels = rng.integers(0, 256, (6, 4)).astype(np.uint8)
        path = str(tmp_path / "scene.pgm")
        write_pgm(path, labels)
        assert np.array_equal(read_pgm(path), labels)

    def test_header_comments_are_skipped(self, tmp_path):
        path = str(tmp_path / "annotated.pgm")
        body = bytes(range(6))
        with open(path, "wb") as f:
            f.write(b"P5\n# made by hand\n3 2\n# and one more\n255\n" + body)
        data = read_pgm(path)
        assert data.shape == (2, 3)
        assert data.tobytes() == body

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.pgm")
        with open(path, "wb") as f:
            f.write(b"P2\n3 2\n255\n")
        with pytest.raises(DataError):
            read_pgm(path)

    def test_wrong_variant(self, tmp_path):
        path = str(tmp_path / "gray.pgm")
        write_pgm(path, np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(DataError):
            read_ppm(path)

    def test_truncated_pixels(self, tmp_path):
        path = str(tmp_path / "short.pgm")
        with open(path, "wb") as f:
            f.write(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(DataError):
            read_pgm(path)

    def test_truncated_header(self, tmp_path):
        path = str(tmp_path / "stub.pgm")
        with open(path, "wb") as f:
            f.write(b"P5\n4")
        with pytest.raises(DataError):
            read_pgm(path)

    def test_unsupported_maxval(self, tmp_path):
        path = str(tmp_path / "deep.pgm")
        with open(path, "wb") as f:
            f.write(b"P5\n1 1\n65535\n\0\0")
        with pytest.raises(DataError):
            read_pgm(path)

    def test_writer_input_checks(self, tmp_path):
        with pytest.raises(DataError):
            write_ppm(str(tmp_path / "x.ppm"), np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(DataError):
            write_pgm(str(tmp_path / "x.pgm"), np.zeros((2, 2, 3), dtype=np.uint8))


class TestDatasetRoundTrip:
    def test_write_then_load(self, tmp_path):
        train = generate_scenes(2, 3, 12, 3)
        eval_scenes = generate_scenes(2, 2, 12, 3, stream=1)
        write_dataset(str(tmp_path), train, eval_scenes)
        loaded = load_dataset(str(tmp_path))
        assert len(loaded["train"]) == 3
        assert len(loaded["eval"]) == 2
        for orig, back in zip(train + eval_scenes,
                              loaded["train"] + loaded["eval"]):
            assert np.array_equal(orig.image, back.image)
            assert np.array_equal(orig.labels, back.labels)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(str(tmp_path))

    def test_malformed_manifest_line(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("train only_two_fields\n")
        with pytest.raises(DataError):
            load_dataset(str(tmp_path))

    def test_unknown_split(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("test a.ppm b.pgm\n")
        with pytest.raises(DataError):
            load_dataset(str(tmp_path))

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("\n")
        with pytest.raises(DataError):
            load_dataset(str(tmp_path))


class TestFeatureLift:
    def test_lift_weights_deterministic_and_bounded(self):
        a = lift_weights(3, 14)
        b = lift_weights(3, 14)
        assert np.array_equal(a, b)
        assert a.shape == (14, 3)
        assert np.all(np.abs(a) <= 1.0)
        assert not np.array_equal(a, lift_weights(4, 14))

    def test_scene_features_layout(self, rng):
        scene = generate_scene(rng, 8, 3)
        lift = lift_weights(0, 5)
        fm = scene_features(scene, lift)
        assert fm.tensor.data.shape == (5 + COORD_CHANNELS, 8, 8)
        px = fm.pixels().data
        colors = scene.image.reshape(-1, 3).T / 255.0 - 0.5
        assert np.max(np.abs(px[:5] - lift @ colors)) < 1e-12
        ys = np.repeat(np.linspace(0.0, 1.0, 8), 8)
        xs = np.tile(np.linspace(0.0, 1.0, 8), 8)
        assert np.array_equal(px[5], ys)
        assert np.array_equal(px[6], xs)

    def test_scene_label_map(self, rng):
        scene = generate_scene(rng, 8, 3, ignore_fraction=0.3)
        lm = scene_label_map(scene, 3)
        assert lm.num_classes == 3
        assert lm.ignore_index == 255
        assert np.array_equal(lm.labels, scene.labels.astype(np.int64))
