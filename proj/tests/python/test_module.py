import json

import numpy as np
import pytest

import balr_sam


def test_adapter_arithmetic():
    full, low, reduction = balr_sam.adapter_param_count(768, 768, 16)
    assert (full, low) == (589824, 24576)
    assert reduction == pytest.approx(1 - 24576 / 589824, abs=1e-15)


def test_parameter_split_default():
    frozen, trainable = balr_sam.parameter_split()
    assert trainable / (frozen + trainable) <= 0.10
    assert balr_sam.sam_scale_fraction() <= 0.05


def test_config_errors_carry_position():
    with pytest.raises(balr_sam.FormatError, match="line 2, column 1"):
        balr_sam.parameter_split("depth = 2\nbogus = 1\n")
    with pytest.raises(balr_sam.ConfigError):
        balr_sam.parameter_split("patch_size = 6\n")


def test_cosine_schedule():
    assert balr_sam.cosine_lr(0, 1e-4, 40) == pytest.approx(1e-4)
    assert balr_sam.cosine_lr(20, 1e-4, 40, 1e-6) == pytest.approx((1e-4 + 1e-6) / 2)
    with pytest.raises(balr_sam.ScheduleError):
        balr_sam.cosine_lr(41, 1e-4, 40)


def test_metrics_half_coverage():
    gt = np.zeros((10, 20))
    gt[:, :10] = 1
    pred = np.zeros_like(gt)
    pred[:, :5] = 1
    m = balr_sam.metrics(pred, gt)
    assert m["recall"] == pytest.approx(0.5)
    assert m["precision"] == pytest.approx(1.0)
    assert m["dice"] == pytest.approx(2 / 3)
    with pytest.raises(balr_sam.ValidationError):
        balr_sam.metrics(pred * 0.5 + 0.25, gt)


def test_synth_sample_is_deterministic():
    a_img, a_mask = balr_sam.synth_sample(7, 3)
    b_img, b_mask = balr_sam.synth_sample(7, 3)
    assert a_img.shape == (3, 32, 32) and a_mask.shape == (1, 32, 32)
    np.testing.assert_array_equal(a_img, b_img)
    assert set(np.unique(a_mask)) <= {0.0, 1.0}
    assert 0.05 <= a_mask.mean() <= 0.4


def test_bench_report():
    lr = json.loads(balr_sam.bench_attention("lr-tensor", 64))
    base = json.loads(balr_sam.bench_attention("baseline", 64))
    assert lr["flops_measured"] == lr["flops_analytic"]
    assert lr["peak_bytes"] < base["peak_bytes"]


def test_train_tiny():
    cfg = "image_size = 32\npatch_size = 8\nembed_dim = 16\ndepth = 1\nheads = 2\nmlp_ratio = 2\n" \
          "adapter_rank = 4\nattn_ranks = 4, 4, 4\nhead_channels = 4\n"
    a = json.loads(balr_sam.train(cfg, seed=3, epochs=2))
    b = json.loads(balr_sam.train(cfg, seed=3, epochs=2))
    assert len(a["epochs"]) == 2
    assert a == b


def test_verify_filter():
    passed, report = balr_sam.verify("rope")
    checks = json.loads(report)["checks"]
    assert passed
    assert checks and all("rope" in c["name"] for c in checks)
