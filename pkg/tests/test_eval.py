import hashlib

import numpy as np
import pytest
import torch

from regionssl.config import AugmentationConfig, EvalConfig
from regionssl.data import SyntheticFaceSpec, SyntheticSource, synth_labeled_dataset
from regionssl.evaluate import (export_heatmaps, extract_features,
                                image_heatmaps, iou_matrix, linear_probe,
                                score_discovery, threshold_by_mass,
                                uniform_baseline_iou)


AUG = AugmentationConfig(crop_size=64)


def encoder_digest(branch):
    h = hashlib.sha256()
    for name, p in sorted(branch.encoder.state_dict().items()):
        h.update(name.encode())
        h.update(p.numpy().tobytes())
    return h.hexdigest()


@pytest.fixture
def labeled():
    spec = SyntheticFaceSpec(canvas_size=64)
    train = synth_labeled_dataset(spec, 16, seed=0)
    test = synth_labeled_dataset(spec, 8, seed=1)
    return train, test


class TestFeatures:
    def test_shape_and_determinism(self, tiny_pair, labeled):
        (train_x, _), _ = labeled
        a = extract_features(tiny_pair.online, train_x, AUG)
        b = extract_features(tiny_pair.online, train_x, AUG)
        assert a.shape == (16, tiny_pair.online.encoder.feature_dim)
        assert torch.equal(a, b)

    def test_batched_equals_single_pass(self, tiny_pair, labeled):
        (train_x, _), _ = labeled
        whole = extract_features(tiny_pair.online, train_x, AUG, batch_size=16)
        chunked = extract_features(tiny_pair.online, train_x, AUG, batch_size=5)
        assert torch.allclose(whole, chunked, atol=1e-6)

    def test_restores_training_mode(self, tiny_pair, labeled):
        (train_x, _), _ = labeled
        tiny_pair.online.train()
        extract_features(tiny_pair.online, train_x, AUG)
        assert tiny_pair.online.training


class TestLinearProbe:
    def run_probe(self, pair, labeled, seed=0, epochs=5):
        (train_x, train_y), (test_x, test_y) = labeled
        cfg = EvalConfig(probe_epochs=epochs, probe_batch_size=8)
        return linear_probe(pair.online, train_x, train_y, test_x, test_y,
                            cfg, AUG, seed=seed)

    def test_report_fields(self, tiny_pair, labeled):
        report = self.run_probe(tiny_pair, labeled)
        assert report.n_train == 16
        assert report.n_test == 8
        assert 0.0 <= report.accuracy <= 1.0
        assert report.encoder_frozen

    def test_deterministic_given_seed(self, tiny_pair, labeled):
        a = self.run_probe(tiny_pair, labeled, seed=3)
        b = self.run_probe(tiny_pair, labeled, seed=3)
        assert a.accuracy == b.accuracy

    def test_encoder_untouched(self, tiny_pair, labeled):
        before = encoder_digest(tiny_pair.online)
        self.run_probe(tiny_pair, labeled)
        assert encoder_digest(tiny_pair.online) == before

    def test_zero_train_examples_rejected(self, tiny_pair):
        empty = torch.zeros(0, 3, 64, 64)
        labels = torch.zeros(0, dtype=torch.long)
        test_x = torch.rand(2, 3, 64, 64)
        test_y = torch.zeros(2, dtype=torch.long)
        with pytest.raises(ValueError):
            linear_probe(tiny_pair.online, empty, labels, test_x, test_y,
                         EvalConfig(), AUG)

    def test_count_mismatch_rejected(self, tiny_pair, labeled):
        (train_x, train_y), (test_x, test_y) = labeled
        with pytest.raises(ValueError):
            linear_probe(tiny_pair.online, train_x, train_y[:-1], test_x, test_y,
                         EvalConfig(), AUG)

    def test_separable_features_reach_high_accuracy(self, tiny_pair):
        """Pooled-feature shortcut: labels painted into the image mean."""
        g = torch.Generator().manual_seed(0)
        x = torch.rand(32, 3, 64, 64, generator=g) * 0.2
        y = torch.arange(32) % 2
        x[y == 1] += 0.6  # bright class / dark class
        report = linear_probe(tiny_pair.online, x[:24], y[:24], x[24:], y[24:],
                              EvalConfig(probe_epochs=20, probe_batch_size=8),
                              AUG, seed=0)
        assert report.accuracy >= 0.9


class TestHeatmapExport:
    def test_upsampled_field_still_normalized(self, tiny_pair):
        images = torch.rand(2, 3, 64, 64)
        maps = image_heatmaps(tiny_pair.online, images, AUG, temperature=0.1)
        assert maps.shape == (2, 8, 64, 64)
        sums = maps.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_export_file_set(self, tiny_pair, tmp_path):
        images = torch.rand(2, 3, 64, 64)
        written = export_heatmaps(tiny_pair.online, images, tmp_path, AUG)
        # per image: 8 region maps + 1 overlay + 1 raw archive
        assert len(written) == 2 * (8 + 2)
        for path in written:
            assert path.exists()

    def test_raw_archive_round_trips(self, tiny_pair, tmp_path):
        images = torch.rand(1, 3, 64, 64)
        export_heatmaps(tiny_pair.online, images, tmp_path, AUG)
        reloaded = np.load(tmp_path / "image000_heatmaps.npz")["heatmaps"]
        expected = image_heatmaps(tiny_pair.online, images, AUG, 0.1)[0].numpy()
        assert np.allclose(reloaded, expected, atol=1e-6)

    def test_png_matches_normalized_array(self, tiny_pair, tmp_path):
        from PIL import Image
        images = torch.rand(1, 3, 64, 64)
        export_heatmaps(tiny_pair.online, images, tmp_path, AUG)
        raw = np.load(tmp_path / "image000_heatmaps.npz")["heatmaps"][0]
        png = np.asarray(Image.open(tmp_path / "image000_region0.png")) / 255.0
        span = raw.max() - raw.min()
        normalized = (raw - raw.min()) / (span if span > 0 else 1.0)
        assert np.abs(png - normalized).max() <= 1.0 / 255 + 1e-6


class TestThreshold:
    def test_distinct_values_keep_smallest_prefix(self):
        hm = torch.tensor([[[0.5, 0.3], [0.15, 0.05]]])
        assert threshold_by_mass(hm, 0.5).sum() == 1
        assert threshold_by_mass(hm, 0.6).sum() == 2
        assert threshold_by_mass(hm, 0.9).sum() == 3

    def test_binary_mask_kept_whole(self):
        mask = torch.zeros(1, 4, 4)
        mask[0, 1:3, 1:3] = 1.0
        kept = threshold_by_mass(mask, 0.5)
        assert torch.equal(kept, mask.bool())

    def test_uniform_keeps_everything(self):
        uniform = torch.full((1, 4, 4), 1 / 16)
        assert threshold_by_mass(uniform, 0.5).all()

    def test_channels_independent(self):
        hm = torch.stack([
            torch.tensor([[0.9, 0.1], [0.0, 0.0]]),
            torch.tensor([[0.25, 0.25], [0.25, 0.25]]),
        ]).reshape(2, 2, 2)
        kept = threshold_by_mass(hm, 0.5)
        assert kept[0].sum() == 1
        assert kept[1].sum() == 4


class TestIoU:
    def test_identical_masks_score_one(self):
        masks = torch.zeros(3, 5, 5, dtype=torch.bool)
        masks[0, :2] = True
        masks[1, 2:4] = True
        masks[2, 4:] = True
        m = iou_matrix(masks, masks)
        assert torch.allclose(m.diagonal(), torch.ones(3))

    def test_disjoint_masks_score_zero(self):
        a = torch.zeros(1, 4, 4, dtype=torch.bool)
        b = torch.zeros(1, 4, 4, dtype=torch.bool)
        a[0, :2] = True
        b[0, 2:] = True
        assert float(iou_matrix(a, b)[0, 0]) == 0.0

    def test_half_overlap_hand_value(self):
        a = torch.zeros(1, 1, 4, dtype=torch.bool)
        b = torch.zeros(1, 1, 4, dtype=torch.bool)
        a[0, 0, :2] = True   # {0, 1}
        b[0, 0, 1:3] = True  # {1, 2}: intersection 1, union 3
        assert float(iou_matrix(a, b)[0, 0]) == pytest.approx(1 / 3)


class TestBaseline:
    def test_hand_value(self):
        # part covers 1/4 of the canvas, threshold keeps 1/2: best IoU 0.5
        masks = torch.zeros(1, 2, 2, dtype=torch.bool)
        masks[0, 0, 0] = True
        assert uniform_baseline_iou(masks, 0.5) == pytest.approx(0.5)

    def test_part_equal_to_quantile_is_perfect(self):
        masks = torch.zeros(1, 2, 2, dtype=torch.bool)
        masks[0, 0] = True  # fraction 0.5
        assert uniform_baseline_iou(masks, 0.5) == pytest.approx(1.0)

    def test_small_parts_give_small_baseline(self):
        masks = torch.zeros(2, 10, 10, dtype=torch.bool)
        masks[0, 0, 0] = True   # 1%
        masks[1, 0, :5] = True  # 5%
        expected = (0.01 / 0.5 + 0.05 / 0.5) / 2
        assert uniform_baseline_iou(masks, 0.5) == pytest.approx(expected)


class TestDiscovery:
    def test_report_structure(self, tiny_pair):
        source = SyntheticSource(SyntheticFaceSpec(canvas_size=64), 4, seed=0)
        cfg = EvalConfig(discovery_images=3)
        report = score_discovery(tiny_pair.online, source, cfg, AUG)
        assert report.n_images == 3
        assert len(report.heatmap_scores) == 8
        assert len(report.assignment) == 7  # one heatmap stays unmatched
        assert 0.0 <= report.mean_iou <= 1.0
        assert 0.0 <= report.baseline_iou <= 1.0

    def test_matching_is_injective(self, tiny_pair):
        source = SyntheticSource(SyntheticFaceSpec(canvas_size=64), 2, seed=0)
        report = score_discovery(tiny_pair.online, source,
                                 EvalConfig(discovery_images=2), AUG)
        heatmap_ids = [r for r, _ in report.assignment]
        part_ids = [c for _, c in report.assignment]
        assert len(set(heatmap_ids)) == len(heatmap_ids)
        assert sorted(part_ids) == list(range(7))

    def test_deterministic(self, tiny_pair):
        source = SyntheticSource(SyntheticFaceSpec(canvas_size=64), 2, seed=0)
        a = score_discovery(tiny_pair.online, source, EvalConfig(discovery_images=2), AUG)
        b = score_discovery(tiny_pair.online, source, EvalConfig(discovery_images=2), AUG)
        assert a.mean_iou == b.mean_iou
        assert a.iou_matrix == b.iou_matrix
