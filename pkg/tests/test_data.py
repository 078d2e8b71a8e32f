import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from xkd.data import (
    DatasetManifest,
    DatasetSplit,
    SyntheticSpec,
    batches,
    generate_synthetic,
    preprocess,
    render_blob,
    scan_folder,
    split_counts,
)


def make_folder(root, per_class, classes=("a", "b", "c"), size=8):
    rng = np.random.default_rng(0)
    for c in classes:
        (root / c).mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(root / c / f"{i:03d}.png")
    return root


class TestSplitPolicy:
    def test_65_15_20(self, tmp_path):
        m = scan_folder(make_folder(tmp_path, 100, classes=("x", "y")), (65, 15, 20), seed=1)
        for k in range(2):
            counts = [sum(1 for _, c in m.splits[r] if c == k) for r in ("train", "val", "test")]
            assert counts == [65, 15, 20]

    def test_70_10_20(self, tmp_path):
        m = scan_folder(make_folder(tmp_path, 10), (70, 10, 20), seed=1)
        for k in range(3):
            counts = [sum(1 for _, c in m.splits[r] if c == k) for r in ("train", "val", "test")]
            assert counts == [7, 1, 2]

    @pytest.mark.parametrize("n", range(1, 40))
    def test_floor_then_remainder(self, n):
        tr, va, te = split_counts(n, (65, 15, 20))
        assert va == (n * 15) // 100 and te == (n * 20) // 100 and tr == n - va - te

    def test_bad_policy(self, tmp_path):
        with pytest.raises(ValueError, match="sum to 100"):
            scan_folder(make_folder(tmp_path, 3), (60, 20, 10))

    def test_partition(self, tmp_path):
        m = scan_folder(make_folder(tmp_path, 17), (65, 15, 20), seed=3)
        sets = [set(f for f, _ in m.splits[r]) for r in ("train", "val", "test")]
        everything = set(f for fl in m.files.values() for f in fl)
        assert sets[0] | sets[1] | sets[2] == everything
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert sum(map(len, sets)) == len(everything)

    def test_deterministic_and_seed_sensitive(self, tmp_path):
        root = make_folder(tmp_path, 20)
        a, b = scan_folder(root, seed=5), scan_folder(root, seed=5)
        assert a.content_hash == b.content_hash
        assert scan_folder(root, seed=6).content_hash != a.content_hash

    def test_manifest_round_trip(self, tmp_path):
        m = scan_folder(make_folder(tmp_path / "d", 5), seed=2)
        path = m.save(tmp_path / "m.json")
        m2 = DatasetManifest.load(path)
        assert m2.content_hash == m.content_hash and m2.splits == m.splits

    def test_tampered_manifest_rejected(self, tmp_path):
        m = scan_folder(make_folder(tmp_path / "d", 5), seed=2)
        path = m.save(tmp_path / "m.json")
        d = json.loads(path.read_text())
        d["seed"] = 99
        path.write_text(json.dumps(d))
        with pytest.raises(ValueError, match="hash"):
            DatasetManifest.load(path)

    def test_empty_class(self, tmp_path):
        root = make_folder(tmp_path, 3)
        (root / "empty").mkdir()
        with pytest.raises(ValueError, match="no decodable"):
            scan_folder(root)

    def test_undecodable_excluded(self, tmp_path):
        root = make_folder(tmp_path, 3)
        (root / "a" / "broken.png").write_bytes(b"garbage")
        (root / "a" / "notes.txt").write_text("hi")
        with pytest.warns(UserWarning, match="excluded 2"):
            m = scan_folder(root)
        assert sorted(m.rejected) == ["a/broken.png", "a/notes.txt"]
        assert all("broken" not in f for f in m.files["a"])

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_folder(tmp_path / "missing")


class TestPreprocess:
    def test_resize(self, tmp_path):
        Image.new("RGB", (448, 448), (10, 20, 30)).save(tmp_path / "a.png")
        assert preprocess(tmp_path / "a.png", 224).shape == (3, 224, 224)

    def test_identity_when_conforming(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / "a.png")
        out = preprocess(tmp_path / "a.png", 224)
        assert np.array_equal(out, arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255))
        assert np.array_equal(preprocess(tmp_path / "a.png", 224), out)

    def test_white(self, tmp_path):
        Image.new("RGB", (50, 30), (255, 255, 255)).save(tmp_path / "w.jpg")
        assert np.all(preprocess(tmp_path / "w.jpg", 64) == 1.0)

    def test_grayscale_replicated(self, tmp_path):
        Image.new("L", (16, 16), 128).save(tmp_path / "g.bmp")
        out = preprocess(tmp_path / "g.bmp", None, channels=3)
        assert out.shape == (3, 16, 16)
        assert np.all(out[0] == out[1]) and np.all(out[1] == out[2])

    def test_decode_failure(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"nope")
        with pytest.raises(ValueError, match="decode"):
            preprocess(tmp_path / "x.png")


class TestSynthetic:
    def test_default_sizes(self, tmp_path):
        m = generate_synthetic(SyntheticSpec(), tmp_path)
        assert [len(m.splits[r]) for r in ("train", "val", "test")] == [300, 60, 90]
        assert m.class_names == ["region0", "region1", "region2"]

    def test_byte_identical(self, tmp_path):
        spec = SyntheticSpec(counts=(3, 1, 1), seed=4)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")

        def digest(root):
            return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}

        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_noise_free_brightest_pixel_decides_class(self):
        spec = SyntheticSpec(noise=0.0)
        rows, cols, cell = spec.grid()
        rng = np.random.default_rng(0)
        for k in range(spec.num_classes):
            for _ in range(30):
                img, box = render_blob(spec, k, rng)
                yy, xx = np.unravel_index(np.argmax(img), img.shape)
                assert (yy // cell) * cols + xx // cell == k
                assert box[0] <= xx <= box[2] and box[1] <= yy <= box[3]

    def test_boxes_inside_frame_and_disjoint_regions(self, tmp_path):
        spec = SyntheticSpec(counts=(10, 0, 0))
        m = generate_synthetic(spec, tmp_path)
        boxes = json.loads((tmp_path / "boxes.json").read_text())
        _, cols, cell = spec.grid()
        for rel, k in m.splits["train"]:
            x0, y0, x1, y1 = boxes[rel]
            assert 0 <= x0 <= x1 < spec.image_size and 0 <= y0 <= y1 < spec.image_size
            assert x0 // cell == x1 // cell == k % cols and y0 // cell == y1 // cell == k // cols

    def test_radius_too_large(self, tmp_path):
        with pytest.raises(ValueError, match="radius"):
            generate_synthetic(SyntheticSpec(blob_radius=9), tmp_path)

    def test_scan_of_materialized_dataset(self, tmp_path):
        generate_synthetic(SyntheticSpec(counts=(7, 1, 2)), tmp_path)
        m = scan_folder(tmp_path, (70, 10, 20), seed=0)
        assert m.has_boxes and len(m.split("test")) == 6
        assert m.split("test").box(0) is not None


class TestBatches:
    def split(self, tmp_path, n=10):
        m = generate_synthetic(SyntheticSpec(num_classes=2, counts=(n, 0, 0)), tmp_path)
        s = m.split("train")
        return s

    def test_sizes(self, tmp_path):
        s = self.split(tmp_path, 5)
        assert [len(y) for _, y in batches(s, 4, seed=0)] == [4, 4, 2]

    def test_fixed_order(self, tmp_path):
        s = self.split(tmp_path)
        a = [x.numpy() for x, _ in batches(s, 3, seed=7, epoch=2)]
        b = [x.numpy() for x, _ in batches(s, 3, seed=7, epoch=2)]
        assert all(np.array_equal(u, v) for u, v in zip(a, b))
        c = [x.numpy() for x, _ in batches(s, 3, seed=7, epoch=3)]
        assert not all(np.array_equal(u, v) for u, v in zip(a, c))

    def test_partition_per_epoch(self, tmp_path):
        s = self.split(tmp_path)
        x_all, _ = s.load()
        seen = np.concatenate([x.numpy() for x, _ in batches(s, 6, seed=1)])
        key = lambda a: sorted(hashlib.sha1(r.tobytes()).hexdigest() for r in a)
        assert key(seen) == key(x_all)

    def test_empty_split(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            next(batches(DatasetSplit("test", tmp_path, ["a"], []), 4))
