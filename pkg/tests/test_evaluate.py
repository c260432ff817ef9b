import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from advsig.augment import BATTERY_NAMES
from advsig.core import CoreError, ImageTensor, quantize_tensor, quantize_to_image
from advsig.evaluate import (
    attack_eval,
    auc_pair_count,
    balanced_accuracy,
    detection_rate,
    eval_detector,
    feature_fid,
    frechet_from_features,
    frechet_gaussian,
    robustness_table,
    roc_auc,
)
from advsig.models import FeatureEmbedder


def brute_force_auc(real, gen):
    wins = ties = 0
    for g in gen:
        for r in real:
            if g > r:
                wins += 1
            elif g == r:
                ties += 1
    return (wins + 0.5 * ties) / (len(real) * len(gen))


class _FixedDetector(nn.Module):
    """Maps each image to a fixed per-image probability via its mean intensity."""

    def __init__(self, n_heads: int = 1, logit: float | None = None):
        super().__init__()
        self.n_heads = n_heads
        self.logit = logit

    def forward_logits(self, x):
        if self.logit is not None:
            return torch.full((x.shape[0], self.n_heads), self.logit)
        means = x.mean(dim=(1, 2, 3), keepdim=True)
        return (means.expand(-1, self.n_heads) - 0.5) * 60.0

    def forward(self, x):
        return torch.sigmoid(self.forward_logits(x))


class TestAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2], [0.8, 0.9]).auc == 1.0

    def test_spec_example(self):
        assert roc_auc([0.1, 0.4], [0.35, 0.8]).auc == 0.75

    def test_identical_multisets_half(self):
        assert roc_auc([0.2, 0.5, 0.9], [0.2, 0.5, 0.9]).auc == 0.5

    def test_empty_rejected(self):
        with pytest.raises(CoreError):
            roc_auc([], [0.5])

    def test_curve_monotone_with_endpoints(self):
        curve = roc_auc([0.1, 0.3, 0.3, 0.7], [0.2, 0.6, 0.9])
        assert curve.points[0] == (0.0, 0.0)
        assert curve.points[-1] == (1.0, 1.0)
        fprs = [p[0] for p in curve.points]
        tprs = [p[1] for p in curve.points]
        assert fprs == sorted(fprs)
        assert tprs == sorted(tprs)

    @given(
        st.lists(st.integers(0, 20), min_size=1, max_size=50),
        st.lists(st.integers(0, 20), min_size=1, max_size=50),
    )
    @settings(max_examples=120, deadline=None)
    def test_matches_brute_force_pair_counting(self, real_raw, gen_raw):
        # coarse grid forces plenty of ties
        real = [r / 20 for r in real_raw]
        gen = [g / 20 for g in gen_raw]
        assert auc_pair_count(np.array(real), np.array(gen)) == pytest.approx(
            brute_force_auc(real, gen), abs=1e-12
        )


class TestFrechet:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(300, 4))
        value, flag = frechet_from_features(f, f)
        assert value <= 1e-6
        assert not flag

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        fa = rng.normal(size=(400, 6))
        fb = rng.normal(1.0, 1.5, size=(400, 6))
        ab, _ = frechet_from_features(fa, fb)
        ba, _ = frechet_from_features(fb, fa)
        assert ab == pytest.approx(ba, rel=1e-9)

    def test_one_dimensional_gaussian_closed_form(self):
        rng = np.random.default_rng(7)
        fa = rng.normal(0.0, 1.0, size=10_000)
        fb = rng.normal(1.0, 1.0, size=10_000)
        value, _ = frechet_from_features(fa, fb)
        assert value == pytest.approx(1.0, abs=0.02)

    def test_matches_scipy_sqrtm_oracle(self):
        scipy_linalg = pytest.importorskip("scipy.linalg")
        rng = np.random.default_rng(3)
        a = rng.normal(size=(6, 6))
        b = rng.normal(size=(6, 6))
        cov_a = a @ a.T + 0.1 * np.eye(6)
        cov_b = b @ b.T + 0.1 * np.eye(6)
        mu_a = rng.normal(size=6)
        mu_b = rng.normal(size=6)
        ours, _ = frechet_gaussian(mu_a, cov_a, mu_b, cov_b)
        sqrtm = scipy_linalg.sqrtm(cov_a @ cov_b).real
        oracle = float(
            (mu_a - mu_b) @ (mu_a - mu_b) + np.trace(cov_a + cov_b - 2 * sqrtm)
        )
        assert ours == pytest.approx(oracle, rel=1e-8)

    def test_indefinite_covariance_triggers_regularization_flag(self):
        cov = np.array([[1.0, 0.0], [0.0, -1e-3]])
        value, flag = frechet_gaussian(np.zeros(2), cov, np.zeros(2), np.eye(2))
        assert flag
        assert value >= 0.0

    def test_sample_count_guard(self, toy_batch):
        images, _ = toy_batch
        emb = FeatureEmbedder(width=8, feature_dim=8, num_classes=4)
        emb.freeze()
        small = ImageTensor(images[:8], quantized=True)
        with pytest.raises(CoreError, match="2\\*k"):
            feature_fid(small, small, emb)

    def test_feature_fid_zero_for_identical(self, toy_batch):
        images, _ = toy_batch
        emb = FeatureEmbedder(width=8, feature_dim=4, num_classes=4)
        emb.freeze()
        s = ImageTensor(images[:16], quantized=True)
        value = feature_fid(s, s, emb)
        assert value <= 1e-6


class TestEvalDetector:
    def test_constant_half_scores_half_on_balanced_sets(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector(logit=0.0)
        real = ImageTensor(images[:10], quantized=True)
        gen = ImageTensor(images[10:20], quantized=True)
        report = eval_detector(det, real, gen)
        assert report.accuracy == 0.5

    def test_sample_order_invariance(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector()
        real = ImageTensor(images[:12], quantized=True)
        gen = ImageTensor(images[12:24], quantized=True)
        a = eval_detector(det, real, gen)
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(0))
        b = eval_detector(
            det,
            ImageTensor(images[:12][perm], quantized=True),
            ImageTensor(images[12:24][perm], quantized=True),
        )
        assert a.accuracy == b.accuracy
        assert a.auc == b.auc

    def test_deterministic_repeat(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector()
        real = ImageTensor(images[:8], quantized=True)
        gen = ImageTensor(images[8:16], quantized=True)
        assert eval_detector(det, real, gen).to_json() == eval_detector(det, real, gen).to_json()

    def test_training_overlap_rejected(self, toy_batch):
        from advsig.data import _image_hashes

        images, _ = toy_batch
        det = _FixedDetector()
        real = ImageTensor(images[:8], quantized=True)
        gen = ImageTensor(images[8:16], quantized=True)
        train_hashes = set(_image_hashes(images[:4]))
        with pytest.raises(CoreError, match="overlap"):
            eval_detector(det, real, gen, train_hashes=train_hashes)

    def test_code_accuracies(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector(n_heads=2, logit=15.0)  # predicts 11 for everything
        real = ImageTensor(images[:6], quantized=True)
        gen = ImageTensor(images[6:12], quantized=True)
        codes = torch.tensor([[1.0, 1.0]] * 3 + [[1.0, 0.0]] * 3)
        report = eval_detector(det, real, gen, gen_codes=codes)
        assert report.bitwise_accuracy == pytest.approx((6 + 3 + 3 + 0) / 12)
        assert report.exact_match_accuracy == pytest.approx(0.5)

    def test_paired_psnr_stats(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector()
        real = ImageTensor(images[:6], quantized=True)
        offset = quantize_to_image((images[:6] + 1 / 255).clamp(0, 1))
        report = eval_detector(det, real, offset, paired=True)
        assert report.psnr_mean == pytest.approx(20 * np.log10(255), abs=0.2)


class TestRobustness:
    def test_rows_match_battery(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector()
        table = robustness_table(det, ImageTensor(images[:6], quantized=True))
        assert tuple(table) == BATTERY_NAMES

    def test_identity_transformation_equals_plain_rate(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector()
        samples = ImageTensor(images[:10], quantized=True)
        plain = detection_rate(det, samples)
        identity = detection_rate(det, ImageTensor(quantize_tensor(samples.data), quantized=True))
        assert identity == plain

    def test_balanced_accuracy_definition(self, toy_batch):
        images, _ = toy_batch
        det = _FixedDetector()
        real = ImageTensor(images[:10], quantized=True)
        gen = ImageTensor(images[10:20], quantized=True)
        acc = balanced_accuracy(det, real, gen)
        expected = 0.5 * ((1 - detection_rate(det, real)) + detection_rate(det, gen))
        assert acc == expected


class TestAttackHarness:
    def test_missing_setting_warns_and_skips(self, tiny_dataset):
        with pytest.warns(UserWarning, match="skipped"):
            report = attack_eval({}, tiny_dataset, attack_iterations=1, expected_settings=("default",))
        assert report["settings"] == {}
        assert report["warnings"]
