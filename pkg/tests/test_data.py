import pytest
import torch

from advsig.config import DatasetSpec
from advsig.core import CoreError, ImageTensor, quantize_to_image
from advsig.data import ingest_dataset, toy_images
from advsig.tensorio import file_sha256, save_image_png


class TestToySet:
    def test_deterministic_from_seed(self):
        a, la = toy_images(40, 32, seed=7)
        b, lb = toy_images(40, 32, seed=7)
        assert torch.equal(a, b)
        assert torch.equal(la, lb)

    def test_different_seed_differs(self):
        a, _ = toy_images(10, 32, seed=7)
        b, _ = toy_images(10, 32, seed=8)
        assert not torch.equal(a, b)

    def test_quantized_and_in_range(self):
        images, labels = toy_images(16, 32, seed=3)
        ImageTensor(images, quantized=True)  # validates the grid contract
        assert labels.min() >= 0 and labels.max() <= 3

    def test_all_classes_present(self):
        _, labels = toy_images(200, 32, seed=1)
        assert set(labels.tolist()) == {0, 1, 2, 3}


class TestIngest:
    def test_split_sizes_and_disjoint_hashes(self):
        ds = ingest_dataset(DatasetSpec(source="toy", count=500, test_size=1000, split_seed=2))
        # test size scales down to a fifth when the set is small
        assert len(ds.test_hashes) == 100
        assert len(ds.train_hashes) == 400
        assert not set(ds.train_hashes) & set(ds.test_hashes)

    def test_full_test_size_when_large_enough(self):
        ds = ingest_dataset(DatasetSpec(source="toy", count=5000, test_size=1000, split_seed=2))
        assert len(ds.test_hashes) == 1000
        assert len(ds.train_hashes) == 4000

    def test_materialized_tree_byte_identical(self, tmp_path):
        spec = DatasetSpec(source="toy", count=30, test_size=6, split_seed=7)
        ingest_dataset(spec, out_dir=tmp_path / "a")
        ingest_dataset(spec, out_dir=tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
        assert files_a == files_b
        for rel in files_a:
            assert file_sha256(tmp_path / "a" / rel) == file_sha256(tmp_path / "b" / rel)

    def test_directory_ingest_with_corrupt_file(self, tmp_path):
        src = tmp_path / "imgs"
        src.mkdir()
        gen = torch.Generator().manual_seed(0)
        for i in range(6):
            img = quantize_to_image(torch.rand(1, 3, 32, 32, generator=gen))
            save_image_png(img, src / f"ok_{i}.png")
        (src / "broken.png").write_bytes(b"not a png at all")
        ds = ingest_dataset(DatasetSpec(source=str(src), count=1, test_size=2, split_seed=0))
        assert len(ds.skipped) == 1
        assert "broken.png" in ds.skipped[0]
        assert len(ds.train_hashes) + len(ds.test_hashes) == 6
        assert ds.manifest["skipped_count"] == 1

    def test_wrong_size_images_skipped(self, tmp_path):
        src = tmp_path / "imgs"
        src.mkdir()
        gen = torch.Generator().manual_seed(0)
        save_image_png(quantize_to_image(torch.rand(1, 3, 32, 32, generator=gen)), src / "good.png")
        save_image_png(quantize_to_image(torch.rand(1, 3, 16, 16, generator=gen)), src / "small.png")
        ds = ingest_dataset(DatasetSpec(source=str(src), test_size=1, split_seed=0))
        assert len(ds.skipped) == 1

    def test_empty_directory_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(CoreError, match="no readable"):
            ingest_dataset(DatasetSpec(source=str(tmp_path / "empty")))

    def test_missing_directory_rejected(self):
        with pytest.raises(CoreError, match="not found"):
            ingest_dataset(DatasetSpec(source="/nonexistent/path"))

    def test_round_trip_through_materialized_tree(self, tmp_path):
        from advsig.data import load_materialized

        spec = DatasetSpec(source="toy", count=25, test_size=5, split_seed=7)
        ds = ingest_dataset(spec, out_dir=tmp_path / "tree")
        back = load_materialized(tmp_path / "tree")
        assert torch.equal(ds.train_images, back.train_images)
        assert torch.equal(ds.test_images, back.test_images)
        assert back.train_labels is not None
        assert torch.equal(ds.train_labels, back.train_labels)
