import pytest
import torch

from advsig.checkpoints import ModelBundle
from advsig.config import GeneratorConfig, Stage1Config, Stage2Config
from advsig.core import BinaryCode, CoreError, ImageTensor
from advsig.generators import TinyGan
from advsig.models import CodeEmbedding, SignatureDetector, SignatureInjector
from advsig.stage2 import SignedDataset, exact_match_rate, finetune, sign_dataset
from advsig.tensorio import file_sha256


def tiny_bundle(n: int = 1) -> ModelBundle:
    cfg = Stage1Config(
        n=n,
        injector_width=8,
        injector_stages=3,
        detector_width=8,
        detector_blocks=2,
        embed_dim=16,
        max_iterations=0,
    )
    torch.manual_seed(0)
    return ModelBundle(
        injector=SignatureInjector(base_width=8, stages=3, embed_dim=16),
        detector=SignatureDetector(base_width=8, n_heads=n, blocks=2),
        embedding=CodeEmbedding(n, dim=16),
        config=cfg,
    )


def gan_cfg(**kw) -> GeneratorConfig:
    base = dict(family="gan", latent_dim=16, width=8, iterations=5, batch_size=8, seed=0)
    base.update(kw)
    return GeneratorConfig(**base)


class TestSignDataset:
    def test_counts_and_manifest(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle()
        signed = sign_dataset(
            bundle.injector, bundle.embedding, images[:12], BinaryCode((1,)), bundle.injector_hash
        )
        assert signed.images.shape[0] == 12
        assert signed.manifest["injector_hash"] == bundle.injector_hash
        assert signed.manifest["code"] == "1"
        assert len(signed.manifest["per_file_psnr"]) == 12

    def test_zero_code_rejected(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle(n=2)
        with pytest.raises(CoreError, match="non-zero"):
            sign_dataset(bundle.injector, bundle.embedding, images[:4], BinaryCode((0, 0)), "h")

    def test_rerun_byte_identical(self, toy_batch, tmp_path):
        images, _ = toy_batch
        bundle = tiny_bundle()
        for sub in ("a", "b"):
            sign_dataset(
                bundle.injector,
                bundle.embedding,
                images[:6],
                BinaryCode((1,)),
                bundle.injector_hash,
                out_dir=tmp_path / sub,
            )
        for name in ("signed_00000.png", "signed_00005.png"):
            assert file_sha256(tmp_path / "a" / name) == file_sha256(tmp_path / "b" / name)


class TestFinetune:
    def test_zero_iterations_keeps_parameters(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle()
        adapter = TinyGan(gan_cfg())
        before = adapter.param_hashes()
        signed = sign_dataset(bundle.injector, bundle.embedding, images[:12], BinaryCode((1,)), bundle.injector_hash)
        cfg = Stage2Config(code=BinaryCode((1,)), family="gan", max_iterations=0, batch_size=4, eval_interval=5)
        finetune(adapter, signed, cfg, bundle)
        assert adapter.param_hashes() == before

    def test_injector_hash_mismatch_rejected(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle()
        adapter = TinyGan(gan_cfg())
        signed = sign_dataset(bundle.injector, bundle.embedding, images[:8], BinaryCode((1,)), "deadbeef")
        cfg = Stage2Config(code=BinaryCode((1,)), family="gan", max_iterations=1, batch_size=4)
        with pytest.raises(CoreError, match="different injector"):
            finetune(adapter, signed, cfg, bundle)

    def test_code_mismatch_rejected(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle(n=2)
        adapter = TinyGan(gan_cfg())
        signed = sign_dataset(
            bundle.injector, bundle.embedding, images[:8], BinaryCode((0, 1)), bundle.injector_hash
        )
        cfg = Stage2Config(code=BinaryCode((1, 0)), family="gan", max_iterations=1, batch_size=4)
        with pytest.raises(CoreError, match="code"):
            finetune(adapter, signed, cfg, bundle)

    def test_family_mismatch_rejected(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle()
        adapter = TinyGan(gan_cfg())
        signed = sign_dataset(bundle.injector, bundle.embedding, images[:8], BinaryCode((1,)), bundle.injector_hash)
        cfg = Stage2Config(code=BinaryCode((1,)), family="ddpm", max_iterations=1, batch_size=4)
        with pytest.raises(CoreError, match="family"):
            finetune(adapter, signed, cfg, bundle)

    def test_finetune_runs_and_checkpoints(self, toy_batch, tmp_path):
        images, _ = toy_batch
        bundle = tiny_bundle()
        adapter = TinyGan(gan_cfg())
        signed = sign_dataset(bundle.injector, bundle.embedding, images[:16], BinaryCode((1,)), bundle.injector_hash)
        cfg = Stage2Config(code=BinaryCode((1,)), family="gan", max_iterations=6, batch_size=4, eval_interval=3)
        history = finetune(adapter, signed, cfg, bundle, run_dir=tmp_path / "ft")
        assert len(history) == 2
        assert (tmp_path / "ft" / "manifest.json").exists()
        assert (tmp_path / "ft" / "history.json").exists()
        import json

        manifest = json.load(open(tmp_path / "ft" / "manifest.json"))
        assert manifest["injector_hash"] == bundle.injector_hash
        assert manifest["signed_dataset_manifest_hash"]


class TestStage2Config:
    def test_zero_code_rejected(self):
        with pytest.raises(CoreError):
            Stage2Config(code=BinaryCode((0, 0)), family="gan")

    def test_guidance_defaults_per_family(self):
        assert Stage2Config(code=BinaryCode((1,)), family="gan").detector_guidance == 0.05
        assert Stage2Config(code=BinaryCode((1,)), family="ddpm").detector_guidance == 0.0

    def test_code_parse_from_string(self):
        cfg = Stage2Config(code="01", family="gan")
        assert cfg.code == BinaryCode((0, 1))


class TestAttributionPieces:
    def test_duplicate_codes_rejected(self, toy_batch, tmp_path):
        from advsig.stage2 import multi_generator_run

        images, _ = toy_batch
        bundle = tiny_bundle(n=2)
        configs = [
            Stage2Config(code=BinaryCode((0, 1)), family="gan", max_iterations=0),
            Stage2Config(code=BinaryCode((0, 1)), family="gan", max_iterations=0),
        ]
        with pytest.raises(CoreError, match="duplicate"):
            multi_generator_run(tmp_path, configs, bundle, images[:8], images[8:16])

    def test_single_bit_detector_rejected(self, toy_batch, tmp_path):
        from advsig.stage2 import multi_generator_run

        images, _ = toy_batch
        bundle = tiny_bundle(n=1)
        configs = [Stage2Config(code=BinaryCode((1,)), family="gan", max_iterations=0)]
        with pytest.raises(CoreError, match="n >= 2"):
            multi_generator_run(tmp_path, configs, bundle, images[:8], images[8:16])

    def test_exact_match_rate_order_invariant(self, toy_batch):
        images, _ = toy_batch
        bundle = tiny_bundle(n=2)
        samples = ImageTensor(images[:10], quantized=True)
        rate = exact_match_rate(bundle.detector, samples, BinaryCode((1, 0)))
        perm = torch.randperm(10, generator=torch.Generator().manual_seed(1))
        shuffled = ImageTensor(images[:10][perm], quantized=True)
        assert exact_match_rate(bundle.detector, shuffled, BinaryCode((1, 0))) == rate

    def test_small_attribution_report_shape(self, toy_batch, tmp_path):
        from advsig.generators import save_generator
        from advsig.stage2 import multi_generator_run

        images, _ = toy_batch
        bundle = tiny_bundle(n=2)
        adapter = TinyGan(gan_cfg())
        save_generator(adapter, tmp_path / "pre")
        configs = [
            Stage2Config(code=BinaryCode((0, 1)), family="gan", max_iterations=2, batch_size=4, eval_interval=2),
            Stage2Config(code=BinaryCode((1, 0)), family="gan", max_iterations=2, batch_size=4, eval_interval=2),
        ]
        report = multi_generator_run(
            tmp_path / "pre",
            configs,
            bundle,
            images[:16],
            images[16:32],
            sample_count=8,
            out_dir=tmp_path / "attr",
        )
        assert [r["code"] for r in report["generators"]] == ["01", "10"]
        assert "real_decoded_as_real" in report
        assert (tmp_path / "attr" / "attribution.md").exists()
