import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unifault.config import (
    EncoderConfig,
    FewShotSpec,
    FinetuneRunConfig,
    OptimizerConfig,
    ScheduleConfig,
)
from unifault.encoder import encode, init_encoder, load_checkpoint, save_checkpoint
from unifault.errors import DataError
from unifault.finetune import (
    AdapterHead,
    aggregate_metrics,
    evaluate,
    export_embeddings,
    finetune,
    format_aggregate,
    metrics_from_predictions,
    sample_few_shot,
)

from conftest import make_window

TINY = EncoderConfig(input_length=64, patch_size=8, model_dim=16, num_layers=1, num_heads=2)


def _labeled_windows(rng, per_class=20, classes=4, length=64):
    """Windows whose class sets both offset and frequency (separable)."""
    out = []
    for label in range(classes):
        for i in range(per_class):
            t = np.linspace(0, 2 * np.pi, length)
            values = 0.5 + 0.1 * label + 0.2 * np.sin((3 + 2 * label) * t + rng.uniform(0, 6.28))
            values += rng.normal(0, 0.01, size=length)
            out.append(
                make_window(
                    values,
                    window_id=f"tgt:r{label}_{i}#w0000#c0",
                    dataset_id="tgt",
                    label=label,
                    recording=f"tgt:r{label}_{i}",
                )
            )
    return out


# ---------------------------------------------------------------------------
# few-shot sampling


def test_per_class_k_exact_stratification():
    rng = np.random.default_rng(0)
    pool = _labeled_windows(rng, per_class=15)
    subset = sample_few_shot(pool, FewShotSpec(mode="per_class_k", value=10, seed=1))
    assert len(subset) == 40
    counts = {}
    for item in subset:
        counts[item.label] = counts.get(item.label, 0) + 1
    assert counts == {0: 10, 1: 10, 2: 10, 3: 10}


def test_total_count_draws_exactly_m():
    rng = np.random.default_rng(1)
    pool = _labeled_windows(rng, per_class=30)
    subset = sample_few_shot(pool, FewShotSpec(mode="total_count", value=100, seed=2))
    assert len(subset) == 100
    assert len({item.window_id for item in subset}) == 100  # without replacement


def test_fraction_mode_rounds_up():
    rng = np.random.default_rng(2)
    pool = _labeled_windows(rng, per_class=13)  # 52 items
    subset = sample_few_shot(pool, FewShotSpec(mode="fraction", value=0.01, seed=3))
    assert len(subset) == math.ceil(0.01 * 52)


def test_sampling_deterministic_and_seed_sensitive():
    rng = np.random.default_rng(3)
    pool = _labeled_windows(rng, per_class=25)
    spec = FewShotSpec(mode="per_class_k", value=5, seed=7)
    ids_a = [w.window_id for w in sample_few_shot(pool, spec)]
    ids_b = [w.window_id for w in sample_few_shot(pool, spec)]
    assert ids_a == ids_b
    other = [w.window_id for w in sample_few_shot(pool, FewShotSpec(mode="per_class_k", value=5, seed=8))]
    assert ids_a != other


def test_short_class_warns_and_reduces(caplog):
    import logging

    rng = np.random.default_rng(4)
    pool = [w for w in _labeled_windows(rng, per_class=3)]
    with caplog.at_level(logging.WARNING):
        subset = sample_few_shot(pool, FewShotSpec(mode="per_class_k", value=10, seed=0))
    assert len(subset) == 12  # 3 per class
    assert any("only" in r.message for r in caplog.records)


def test_sampling_requires_labels_and_capacity():
    rng = np.random.default_rng(5)
    unlabeled = [make_window(rng.normal(size=8), window_id=f"u{i}") for i in range(4)]
    with pytest.raises(DataError):
        sample_few_shot(unlabeled, FewShotSpec(mode="per_class_k", value=1, seed=0))
    pool = _labeled_windows(rng, per_class=2)
    with pytest.raises(DataError):
        sample_few_shot(pool, FewShotSpec(mode="total_count", value=100, seed=0))


# ---------------------------------------------------------------------------
# metrics


def test_metrics_perfect_predictions():
    m = metrics_from_predictions([0, 1, 2, 3], [0, 1, 2, 3], 4)
    assert m.accuracy == 1.0
    assert m.macro_f1 == 1.0
    assert m.per_class_f1 == (1.0, 1.0, 1.0, 1.0)


def test_metrics_all_one_class_example():
    predictions = [0] * 10
    labels = [0] * 5 + [1] * 5
    m = metrics_from_predictions(predictions, labels, 2)
    assert m.accuracy == pytest.approx(0.5)
    assert m.per_class_f1 == (pytest.approx(2 / 3), 0.0)
    assert m.macro_f1 == pytest.approx(1 / 3)


def _brute_force_metrics(predictions, labels, num_classes):
    n = len(labels)
    accuracy = sum(p == t for p, t in zip(predictions, labels)) / n
    f1s = []
    for c in range(num_classes):
        tp = sum(1 for p, t in zip(predictions, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(predictions, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(predictions, labels) if p != c and t == c)
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return accuracy, sum(f1s) / num_classes, f1s


def test_metrics_match_brute_force_counting():
    rng = np.random.default_rng(6)
    for _ in range(300):
        num_classes = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        labels = rng.integers(num_classes, size=n).tolist()
        predictions = rng.integers(num_classes, size=n).tolist()
        m = metrics_from_predictions(predictions, labels, num_classes)
        acc, macro, f1s = _brute_force_metrics(predictions, labels, num_classes)
        assert m.accuracy == acc
        assert m.macro_f1 == pytest.approx(macro, abs=1e-12)
        assert list(m.per_class_f1) == pytest.approx(f1s, abs=1e-12)
        assert sum(sum(row) for row in m.confusion) == n
        assert m.micro_f1 == pytest.approx(m.accuracy, abs=1e-12)


@given(st.integers(2, 5), st.integers(5, 30), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_macro_f1_invariant_to_class_permutation(num_classes, n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(num_classes, size=n).tolist()
    predictions = rng.integers(num_classes, size=n).tolist()
    base = metrics_from_predictions(predictions, labels, num_classes)
    perm = rng.permutation(num_classes).tolist()
    permuted = metrics_from_predictions(
        [perm[p] for p in predictions], [perm[t] for t in labels], num_classes
    )
    assert permuted.macro_f1 == pytest.approx(base.macro_f1, abs=1e-12)
    assert permuted.accuracy == pytest.approx(base.accuracy, abs=1e-12)


# ---------------------------------------------------------------------------
# fine-tuning


def _run_cfg(epochs=200, mode="head_only"):
    return FinetuneRunConfig(batch_size=16, epochs=epochs, mode=mode, seeds=(0,))


def test_head_only_fits_separable_toy_problem():
    rng = np.random.default_rng(7)
    pool = _labeled_windows(rng, per_class=8, classes=3)
    model = init_encoder(TINY, 0)
    head, _, _ = finetune(model, pool, 3, _run_cfg(), OptimizerConfig(), ScheduleConfig(), seed=0)
    metrics = evaluate(model, head, pool, 3)
    assert metrics.accuracy == 1.0  # linearly separable training set


def test_initial_loss_near_log_num_classes():
    rng = np.random.default_rng(8)
    pool = _labeled_windows(rng, per_class=12, classes=4)
    model = init_encoder(TINY, 1)
    emb = encode(model, pool).pooled
    labels = torch.tensor([w.label for w in pool])
    head = AdapterHead(emb.shape[1], 4, seed=0)
    loss = torch.nn.functional.cross_entropy(head(emb), labels)
    assert abs(float(loss) - math.log(4)) / math.log(4) < 0.05


def test_head_only_never_touches_backbone(tmp_path):
    rng = np.random.default_rng(9)
    pool = _labeled_windows(rng, per_class=6)
    model = init_encoder(TINY, 2)
    before = tmp_path / "before.ufck"
    save_checkpoint(model, before)
    finetune(model, pool, 4, _run_cfg(epochs=20), OptimizerConfig(), ScheduleConfig(), seed=1)
    after = tmp_path / "after.ufck"
    save_checkpoint(model, after)
    assert before.read_bytes() == after.read_bytes()


def test_full_mode_updates_backbone():
    rng = np.random.default_rng(10)
    pool = _labeled_windows(rng, per_class=6)
    model = init_encoder(TINY, 3)
    reference = init_encoder(TINY, 3)
    finetune(model, pool, 4, _run_cfg(epochs=3, mode="full"), OptimizerConfig(), ScheduleConfig(), seed=1)
    changed = any(
        not torch.equal(pa, pb)
        for (_, pa), (_, pb) in zip(model.named_parameters(), reference.named_parameters())
    )
    assert changed


def test_finetune_requires_two_classes():
    rng = np.random.default_rng(11)
    pool = [w for w in _labeled_windows(rng, per_class=5) if w.label == 0]
    model = init_encoder(TINY, 4)
    with pytest.raises(DataError):
        finetune(model, pool, 4, _run_cfg(), OptimizerConfig(), ScheduleConfig())


def test_finetune_deterministic():
    rng = np.random.default_rng(12)
    pool = _labeled_windows(rng, per_class=5)
    states = []
    for _ in range(2):
        model = init_encoder(TINY, 5)
        head, _, _ = finetune(model, pool, 4, _run_cfg(epochs=10), OptimizerConfig(), ScheduleConfig(), seed=9)
        states.append({k: v.detach().clone() for k, v in head.state_dict().items()})
    for key in states[0]:
        assert torch.equal(states[0][key], states[1][key])


def test_validation_selects_best_epoch():
    rng = np.random.default_rng(13)
    pool = _labeled_windows(rng, per_class=6)
    val = _labeled_windows(np.random.default_rng(14), per_class=4)
    model = init_encoder(TINY, 6)
    head, _, records = finetune(
        model, pool, 4, _run_cfg(epochs=15), OptimizerConfig(), ScheduleConfig(), seed=2, val_set=val
    )
    assert all("val_accuracy" in r for r in records)
    best = max(r["val_accuracy"] for r in records)
    final = evaluate(model, head, val, 4)
    assert final.accuracy == pytest.approx(best, abs=1e-9)


def test_evaluate_empty_corpus():
    model = init_encoder(TINY, 7)
    head = AdapterHead(16, 2)
    with pytest.raises(DataError):
        evaluate(model, head, [], 2)


# ---------------------------------------------------------------------------
# embedding export


def test_export_embeddings_layout(tmp_path):
    rng = np.random.default_rng(15)
    pool = _labeled_windows(rng, per_class=3)
    model = init_encoder(TINY, 8)
    path = export_embeddings(model, pool, tmp_path / "emb.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[:2] == ["window_id", "label"]
    assert len(header) == 2 + TINY.model_dim
    assert len(body) == len(pool)
    assert body[0][0] == pool[0].window_id


def test_export_identical_after_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    pool = _labeled_windows(rng, per_class=3)
    model = init_encoder(TINY, 9)
    first = export_embeddings(model, pool, tmp_path / "a.csv")
    ck = tmp_path / "model.ufck"
    save_checkpoint(model, ck)
    second = export_embeddings(load_checkpoint(ck), pool, tmp_path / "b.csv")
    assert first.read_bytes() == second.read_bytes()


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_and_format():
    runs = [
        metrics_from_predictions([0, 1], [0, 1], 2, seed=s) for s in range(2)
    ] + [metrics_from_predictions([0, 0], [0, 1], 2, seed=2)]
    agg = aggregate_metrics(runs)
    assert agg["n_runs"] == 3
    assert agg["seeds"] == [0, 1, 2]
    expected_mean = np.mean([1.0, 1.0, 0.5])
    assert agg["accuracy"]["mean"] == pytest.approx(expected_mean)
    assert agg["accuracy"]["std"] == pytest.approx(np.std([1.0, 1.0, 0.5], ddof=1))
    text = format_aggregate(agg)
    assert "±" in text and "ACC" in text and "F1" in text
