"""Acceptance suite. Each test checks one release criterion at its stated
tolerance and prints a pass line. Run with `pytest tests/test_acceptance.py -s`.
"""

import json
import math
import os
import time

import numpy as np
import pytest
import torch

from poselearn import evalreport, training, tuner
from poselearn.backbones import BackboneSpec, FreezePolicy, HeadConfig, ModelAssembly
from poselearn.dataset import HierarchyTable
from poselearn.imageprep import enhance_contrast, median_filter3, sharpen
from poselearn.training import (ArrayData, EarlyStopper, TrainConfig,
                                cross_entropy, fit, lr_schedule)

from oracles import (oracle_confusion, oracle_contrast, oracle_macro_prf,
                     oracle_median3, oracle_rollup, oracle_sharpen, oracle_topk,
                     random_image)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def passed(n, message):
    print(f"\ncriterion {n}: PASS - {message}")


def test_criterion_1_reference_target_documented_not_gated():
    config_path = os.path.join(REPO_ROOT, "configs", "densenet121_reference.cfg")
    assert os.path.isfile(config_path)
    text = open(config_path).read()
    assert "densenet121" in text and "max_epochs = 500" in text
    readme = open(os.path.join(REPO_ROOT, "README.md")).read()
    assert "reference" in readme.lower()
    passed(1, "full-scale run documented as a reference target with a config, "
              "not a CI gate")


def test_criterion_2_preprocessing_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for i in range(100):
        img = random_image(rng, max_size=32)
        factor = float(rng.uniform(0.0, 2.5))
        assert np.array_equal(enhance_contrast(img, factor),
                              oracle_contrast(img, factor)), f"contrast, image {i}"
        assert np.array_equal(median_filter3(img), oracle_median3(img)), \
            f"median, image {i}"
        assert np.array_equal(sharpen(img), oracle_sharpen(img)), \
            f"sharpen, image {i}"
    elapsed = time.perf_counter() - start
    assert elapsed < 30
    passed(2, f"contrast/median/sharpen byte-exact vs scalar oracles on "
              f"100 random images in {elapsed:.1f}s")


def test_criterion_3_filter_identities():
    rng = np.random.default_rng(7)
    fixtures = [random_image(rng) for _ in range(50)]
    fixtures += [np.full((h, w, 3), v, dtype=np.uint8)
                 for h, w, v in ((3, 3, 0), (5, 9, 128), (32, 32, 255))]
    for img in fixtures:
        assert np.array_equal(enhance_contrast(img, 1.0), img)
        for op in (lambda im: enhance_contrast(im, 1.7), median_filter3, sharpen):
            out = op(img)
            assert out.shape == img.shape
            assert out.dtype == np.uint8  # uint8 guarantees the [0,255] range
    for img in fixtures[-3:]:  # the constant images
        assert np.array_equal(median_filter3(img), img)
        assert np.array_equal(sharpen(img), img)
    passed(3, "contrast(1)=identity; median/sharpen fix constants; range and "
              "dimensions preserved over the fixture set")


def test_criterion_4_gradient_check():
    start = time.perf_counter()
    torch.manual_seed(0)
    w = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(2, 4, dtype=torch.float64)
    y = torch.tensor([1, 2])
    loss = cross_entropy(x @ w, y)
    loss.backward()
    eps = 1e-6
    worst = 0.0
    for i in range(4):
        for j in range(3):
            wp, wm = w.detach().clone(), w.detach().clone()
            wp[i, j] += eps
            wm[i, j] -= eps
            fd = (float(cross_entropy(x @ wp, y)) -
                  float(cross_entropy(x @ wm, y))) / (2 * eps)
            g = float(w.grad[i, j])
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    assert worst < 1e-4
    assert elapsed < 10
    passed(4, f"analytic vs central-difference gradients, worst relative "
              f"error {worst:.2e}")


def _five_steps(assembly, size=16):
    optimizer = torch.optim.Adam(
        [p for p in assembly.parameters() if p.requires_grad], lr=0.01)
    torch.manual_seed(0)
    x = torch.randn(4, size, size, 3)
    y = torch.randint(0, 82, (4,))
    for _ in range(5):
        loss = cross_entropy(assembly.forward(x, mode="train"), y)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()


def _check_invariance(assembly, size=16):
    before = {n: p.detach().clone() for n, p in assembly.named_parameters()}
    _five_steps(assembly, size=size)
    changed = 0
    for name, p in assembly.named_parameters():
        if assembly.trainable_mask[name]:
            changed += int(not torch.equal(before[name], p.detach()))
        else:
            assert torch.equal(before[name], p.detach()), \
                f"{assembly.freeze_policy.mode}: frozen {name} changed"
    assert changed >= 1, assembly.freeze_policy.mode


def test_criterion_5_freeze_policy_invariance():
    start = time.perf_counter()
    # truncated backbone covers full fine-tune and last-stage
    for policy in (FreezePolicy("full_finetune"), FreezePolicy("last_stage_only")):
        torch.manual_seed(1)
        _check_invariance(ModelAssembly(BackboneSpec("tiny"), policy, HeadConfig()))
    # the last-5 policy is exercised on the real VGG-16 layer structure
    torch.manual_seed(1)
    _check_invariance(ModelAssembly(BackboneSpec("vgg16"),
                                    FreezePolicy("last_n_layers", n=5),
                                    HeadConfig()), size=32)

    # real family stage tables: resnet50's last stage is layer4, vgg16's
    # last five parameterized layers are its final five convs
    torch.manual_seed(1)
    resnet = ModelAssembly(BackboneSpec("resnet50"),
                           FreezePolicy("last_stage_only"), HeadConfig())
    for name, flag in resnet.trainable_mask.items():
        if not name.startswith("head."):
            assert flag == name.startswith("backbone.layer4")
    vgg = ModelAssembly(BackboneSpec("vgg16"),
                        FreezePolicy("last_n_layers", n=5), HeadConfig())
    trainable = {n.rsplit(".", 1)[0] for n, f in vgg.trainable_mask.items()
                 if f and n.startswith("backbone.")}
    assert trainable == {f"backbone.features.{i}" for i in (19, 21, 24, 26, 28)}
    elapsed = time.perf_counter() - start
    assert elapsed < 120
    passed(5, f"frozen parameters bit-identical after 5 Adam steps under all "
              f"three policies; real stage tables verified ({elapsed:.0f}s)")


def test_criterion_6_schedule_and_early_stopping(monkeypatch):
    # exact lr trace for 20 epochs
    lr0, gamma = 0.01, 0.95
    for t in range(20):
        assert lr_schedule(t, lr0, gamma) == lr0 * gamma ** t

    # synthetic val-loss trace [5,4,3,3,3,...] with patience 2
    trace = iter([5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0])
    snapshots = {}
    call = {"n": 0}

    def scripted_evaluate(assembly, batches):
        epoch = call["n"]
        call["n"] += 1
        snapshots[epoch] = {n: p.detach().clone()
                            for n, p in assembly.named_parameters()}
        return next(trace), 0.0

    monkeypatch.setattr(training, "_evaluate", scripted_evaluate)
    torch.manual_seed(0)
    assembly = ModelAssembly(BackboneSpec("tiny"), FreezePolicy("full_finetune"),
                             HeadConfig())
    x = np.random.default_rng(0).normal(size=(8, 16, 16, 3)).astype(np.float32)
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3], dtype=np.int64)
    data = ArrayData(x, y, x, y, batch_size=8)
    history, best_epoch = fit(assembly, data,
                              TrainConfig(max_epochs=50, batch_size=8,
                                          patience=2, seed=0))
    assert best_epoch == 2
    assert history.records[-1].epoch == 4  # 2 non-improving epochs after best
    for name, p in assembly.named_parameters():
        assert torch.equal(p.detach(), snapshots[2][name]), name
    passed(6, "lr trace exact for 20 epochs; scripted trace stops after "
              "2 non-improving epochs and restores the epoch-2 checkpoint")


def test_criterion_7_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(1, 201))
        c = int(rng.integers(2, 83))
        logits = rng.normal(size=(n, c))
        labels = rng.integers(0, c, size=n)
        pred = rng.integers(0, c, size=n)
        k = int(rng.integers(1, c + 1))
        assert evalreport.topk_accuracy(logits, labels, k) == oracle_topk(
            logits.tolist(), labels.tolist(), k)
        cm = evalreport.confusion_matrix(labels, pred, n_classes=c)
        assert np.array_equal(cm, oracle_confusion(labels.tolist(),
                                                   pred.tolist(), c))
        got = evalreport.macro_prf(cm)[:3]
        expected = oracle_macro_prf(cm)
        assert all(math.isclose(g, e, abs_tol=1e-12)
                   for g, e in zip(got, expected))

    hierarchy = HierarchyTable(l3_to_l2={l3: l3 % 20 for l3 in range(82)},
                               l2_to_l1={l2: l2 % 6 for l2 in range(20)})
    true = rng.integers(0, 82, size=150)
    pred = rng.integers(0, 82, size=150)
    for level, n_up in ((1, 6), (2, 20)):
        got = evalreport.rollup_level(true, pred, hierarchy, level)
        assert np.array_equal(got, oracle_rollup(
            true.tolist(), pred.tolist(), hierarchy.l3_to_l2,
            hierarchy.l2_to_l1, level, got.shape[0]))

    logits = rng.normal(size=(100, 82))
    labels = rng.integers(0, 82, size=100)
    values = [evalreport.topk_accuracy(logits, labels, k) for k in range(1, 83)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0
    elapsed = time.perf_counter() - start
    assert elapsed < 30
    passed(7, f"top-k/confusion/macro-PRF/rollups match brute-force oracles on "
              f"100 random instances in {elapsed:.1f}s")


def _blob_data(seed=0):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(3):
        for _ in range(10):
            img = rng.normal(0, 0.1, size=(16, 16, 3)).astype(np.float32)
            img[..., c] += 1.0
            xs.append(img)
            ys.append(c)
    x, y = np.stack(xs), np.asarray(ys, dtype=np.int64)
    return ArrayData(x, y, x[::5], y[::5], batch_size=10)


def _overfit_run():
    torch.manual_seed(0)
    assembly = ModelAssembly(BackboneSpec("tiny"), FreezePolicy("full_finetune"),
                             HeadConfig(blocks=()))  # smallest head
    config = TrainConfig(max_epochs=50, batch_size=10, lr0=0.01,
                         decay_gamma=0.98, patience=50, seed=0)
    history, _ = fit(assembly, _blob_data(), config)
    return history


def test_criterion_8_desk_scale_overfit():
    start = time.perf_counter()
    history = _overfit_run()
    best_top1 = max(r.train_top1 for r in history.records)
    assert best_top1 >= 0.95
    assert history.records[-1].epoch <= 49
    # deterministic under seed
    again = _overfit_run()
    assert [(r.epoch, r.train_loss, r.val_loss) for r in history.records] == \
           [(r.epoch, r.train_loss, r.val_loss) for r in again.records]
    elapsed = time.perf_counter() - start
    assert elapsed < 300
    passed(8, f"30-image 3-class dataset reaches train top-1 "
              f"{best_top1:.2f} within 50 epochs, deterministic ({elapsed:.0f}s)")


def test_criterion_9_tuner_reproducibility():
    start = time.perf_counter()
    space = tuner.SearchSpace(block_counts=(0, 1, 2), units_choices=(32, 64),
                              dropout_choices=(0.0, 0.2), lr0_choices=(0.01, 0.003),
                              freeze_choices=(FreezePolicy("full_finetune"),
                                              FreezePolicy("last_n_layers", n=1)))
    base = TrainConfig(max_epochs=500, batch_size=10, patience=15, seed=0)

    def run():
        return tuner.random_search(space, 4, 3, _blob_data(),
                                   BackboneSpec("tiny"), base_config=base, seed=5)

    a, b = run(), run()
    key = lambda ts: [(t.trial_id, t.head, t.lr0, t.freeze, t.status,
                       t.val_loss, t.val_top1) for t in ts]
    assert key(a) == key(b)
    for t in a:
        assert space.contains(t.head, t.lr0, t.freeze)
    elapsed = time.perf_counter() - start
    assert elapsed < 600
    passed(9, f"4-trial x 3-epoch search reproduces an identical leaderboard; "
              f"all configs inside the space ({elapsed:.0f}s)")


YOGA82_ROOT = os.environ.get("YOGA82_DATA_ROOT")
YOGA82_MANIFEST = os.environ.get("YOGA82_TRAIN_MANIFEST")


@pytest.mark.skipif(not (YOGA82_ROOT and YOGA82_MANIFEST),
                    reason="optional: set YOGA82_DATA_ROOT and "
                           "YOGA82_TRAIN_MANIFEST to run the scaled check")
def test_criterion_10_scaled_dataset_check():
    from poselearn import dataset
    from poselearn.imageprep import PrepParams
    from poselearn.training import ManifestData

    samples, _ = dataset.parse_manifest(YOGA82_MANIFEST, image_root=YOGA82_ROOT)
    keep = sorted({s.l3 for s in samples})[:10]
    remap = {l3: i for i, l3 in enumerate(keep)}
    subset = [dataset.LabeledSample(s.image_path, s.l1, s.l2, remap[s.l3])
              for s in samples if s.l3 in keep]
    split = dataset.split_train_val(subset, 0.2, seed=0)
    prep = PrepParams(target_size=224)
    data = ManifestData(split, YOGA82_ROOT, prep, None, batch_size=32)
    torch.manual_seed(0)
    assembly = ModelAssembly(BackboneSpec("densenet121", weight_source="imagenet"),
                             FreezePolicy("last_stage_only"),
                             HeadConfig(blocks=((512, 0.2),)))
    config = TrainConfig(max_epochs=20, batch_size=32, lr0=0.001,
                         decay_gamma=0.95, patience=20, seed=0)
    history, _ = fit(assembly, data, config)
    top1 = max(r.val_top1 for r in history.records)
    assert top1 > 0.30  # 3x chance on 10 classes
    passed(10, f"10-class Yoga-82 subset reaches val top-1 {top1:.2f} (> 0.30)")


def test_criterion_11_report_fidelity(tmp_path):
    reference_rows = [
        ("ResNet-50", 0.77, 0.94, 0.81, 0.76, 0.76),
        ("ResNet-101", 0.75, 0.92, 0.77, 0.73, 0.73),
        ("VGG-16", 0.74, 0.92, 0.73, 0.70, 0.69),
        ("DenseNet-121", 0.85, 0.96, 0.87, 0.83, 0.83),
    ]
    paths = []
    for name, t1, t5, p, r, f1 in reference_rows:
        record = {"model_name": name, "averaging": "macro", "top1": t1,
                  "top5": t5, "macro_precision": p, "macro_recall": r,
                  "macro_f1": f1, "excluded_classes": 0, "per_class": [],
                  "confusion": [[1]], "per_level": {}}
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(record))
        paths.append(path)
    table = evalreport.comparison_table(paths)
    lines = table.strip().splitlines()[1:]
    assert lines == ["ResNet-50, 77, 94, 0.81, 0.76, 0.76",
                     "ResNet-101, 75, 92, 0.77, 0.73, 0.73",
                     "VGG-16, 74, 92, 0.73, 0.70, 0.69",
                     "DenseNet-121, 85, 96, 0.87, 0.83, 0.83"]
    passed(11, "stored reference records reproduce the comparison rows "
               "character-for-character")
