import numpy as np
import pytest
from conftest import SMALL_SHAPE, small_model
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binomtest

from tsar.data import ImageDataset, read_trace
from tsar.model import ClassifierConfig, forward, predict, variant_build
from tsar.transfer import (
    TransferConfig,
    evaluate,
    image_mean_gates,
    lr_grid_search,
    run_transfer,
    treatment_dataset,
)


def cfg(**kw):
    base = dict(num_tasks=3, images_per_task=4, lr=1e-2, seed=0, validation_per_class=2)
    base.update(kw)
    return TransferConfig(**base)


def snapshot(model):
    return {k: v.copy() for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("tasks, per_task", [(1, 3), (3, 4), (5, 2)])
def test_step_count_and_trace_length(transfer_glyphs, tasks, per_task, tmp_path):
    res = run_transfer(small_model(), transfer_glyphs, cfg(num_tasks=tasks, images_per_task=per_task), tmp_path / "t.jsonl")
    assert len(res.losses) == tasks * per_task == res.config.total_steps
    assert len(res.trace) == tasks * per_task
    assert len(res.retention_curve) == len(res.per_task_retention) == tasks
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == tasks * per_task + 1
    trace = read_trace(tmp_path / "t.jsonl")
    assert list(trace.tasks) == [t for t in range(tasks) for _ in range(per_task)]


def test_single_task_retention_is_last_task_accuracy(transfer_glyphs):
    res = run_transfer(small_model(), transfer_glyphs, cfg(num_tasks=1, images_per_task=5))
    assert res.final_retention == res.per_task_retention[0] == res.past_task_retention


def test_final_retention_recount(transfer_glyphs):
    res = run_transfer(small_model(), transfer_glyphs, cfg())
    model = res.extra["model"]
    rng = np.random.default_rng(0)
    # recompute the trained images from the same seed stream
    classes = [int(c) for c in rng.choice(transfer_glyphs.num_classes, size=3, replace=False)]
    assert classes == res.classes
    hits = n = 0
    for t, c in enumerate(classes):
        idx = rng.permutation(transfer_glyphs.indices(c))[:4]
        for i in idx:
            hits += int(forward(model, transfer_glyphs.images[i : i + 1]).data.argmax() == t)
            n += 1
    assert res.final_retention == pytest.approx(hits / n)


def test_input_model_untouched_and_deterministic(transfer_glyphs):
    model = small_model()
    before = snapshot(model)
    a = run_transfer(model, transfer_glyphs, cfg(seed=3))
    b = run_transfer(model, transfer_glyphs, cfg(seed=3))
    assert all(np.array_equal(before[k], model.params[k]) for k in before)
    assert a.retention_curve == b.retention_curve and a.validation == b.validation and a.losses == b.losses


def test_pool_smaller_than_images_per_task_rejected(transfer_glyphs):
    with pytest.raises(ValueError, match="fewer than images_per_task"):
        run_transfer(small_model(), transfer_glyphs, cfg(images_per_task=30))


def test_too_many_tasks_rejected(transfer_glyphs):
    with pytest.raises(ValueError, match="exceeds"):
        run_transfer(small_model(), transfer_glyphs, cfg(num_tasks=50))


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        TransferConfig(treatment="sleep")
    with pytest.raises(ValueError):
        TransferConfig(num_tasks=0)


def test_fixed_treatment_keeps_conv_regulation(transfer_glyphs):
    model = small_model()
    res = run_transfer(model, transfer_glyphs, cfg(treatment="fixed"))
    after = res.extra["model"]
    for layer in ("c1", "c2", "c3"):
        for part in ("w", "b"):
            name = f"reg.out.{layer}.{part}"
            assert np.array_equal(after.params[name], model.params[name])
    assert not np.array_equal(after.params["clf.c1.w"], model.params["clf.c1.w"])


def test_normal_treatment_trains_regulatory_output(transfer_glyphs):
    model = small_model("sculpt")
    after = run_transfer(model, transfer_glyphs, cfg()).extra["model"]
    assert not np.array_equal(after.params["reg.out.c1.w"], model.params["reg.out.c1.w"])
    assert np.array_equal(after.params["reg.c1.w"], model.params["reg.c1.w"])


def test_reservoir_rerandomizes_regulator(transfer_glyphs):
    model = small_model("grow")
    after = run_transfer(model, transfer_glyphs, cfg(treatment="reservoir", lr=1e-12)).extra["model"]
    assert not np.allclose(after.params["reg.c1.w"], model.params["reg.c1.w"])
    assert np.all(np.abs(after.params["reg.out.c2.b"] + 8.0) < 1e-6)


def test_oml_conv_stack_frozen_over_100_steps(transfer_glyphs):
    clf = ClassifierConfig(in_shape=SMALL_SHAPE, conv_channels=4, num_classes=3, pool_last=False)
    model = variant_build("oml_style", clf)
    after = run_transfer(model, transfer_glyphs, cfg(num_tasks=5, images_per_task=20, validation_per_class=0)).extra["model"]
    for layer in ("c1", "c2", "c3"):
        for part in ("w", "b"):
            assert np.array_equal(after.params[f"clf.{layer}.{part}"], model.params[f"clf.{layer}.{part}"])


def test_scratch_runs_without_regulator(transfer_glyphs):
    clf = ClassifierConfig(in_shape=SMALL_SHAPE, conv_channels=4, num_classes=3, pool_last=False)
    res = run_transfer(variant_build("scratch", clf), transfer_glyphs, cfg())
    assert res.trace is None and 0.0 <= res.final_retention <= 1.0


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluate_uniform_logits_is_chance():
    clf = ClassifierConfig(in_shape=SMALL_SHAPE, conv_channels=4, num_classes=10, pool_last=False)
    model = variant_build("scratch", clf)
    model.params["clf.cp.w"][...] = 0.0
    x = np.random.default_rng(0).random((50, *SMALL_SHAPE))
    assert evaluate(model, x, np.repeat(np.arange(10), 5)) == pytest.approx(0.1)


def test_evaluate_matches_per_image_recount(transfer_glyphs):
    model = small_model("sculpt")
    x, y = transfer_glyphs.images[:20], transfer_glyphs.labels[:20] % 4
    brute = sum(int(forward(model, x[i]).data.argmax() == y[i]) for i in range(20)) / 20
    assert evaluate(model, x, y, batch_size=7) == brute


def test_memorized_image_scores_one(transfer_glyphs):
    res = run_transfer(small_model("sculpt"), transfer_glyphs, cfg(num_tasks=1, images_per_task=1, lr=0.5))
    assert res.final_retention == 1.0


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate(small_model(), np.zeros((0, *SMALL_SHAPE)), np.zeros(0))


# ---------------------------------------------------------------------------
# learning-rate grid
# ---------------------------------------------------------------------------


def test_grid_singleton(transfer_glyphs):
    assert lr_grid_search(small_model(), transfer_glyphs, [1e-3], cfg()).best_lr == 1e-3


def test_grid_flags_divergent_lr(transfer_glyphs):
    grid = lr_grid_search(small_model("sculpt"), transfer_glyphs, [1e-2, 1e2], cfg())
    rows = {row["lr"]: row for row in grid.table}
    assert rows[1e2]["diverged"] and not rows[1e-2]["diverged"]
    assert grid.best_lr == 1e-2


def test_grid_all_divergent_gives_empty_selection(transfer_glyphs):
    grid = lr_grid_search(small_model("sculpt"), transfer_glyphs, [1e2], cfg())
    assert grid.best_lr is None and grid.table[0]["diverged"]


def test_grid_deduplicates_and_breaks_ties_low(transfer_glyphs):
    grid = lr_grid_search(small_model(), transfer_glyphs, [1e-9, 1e-9, 2e-9], cfg())
    assert [row["lr"] for row in grid.table] == [1e-9, 2e-9]
    assert grid.table[0]["final_retention"] == grid.table[1]["final_retention"]
    assert grid.best_lr == 1e-9


def test_grid_rejects_empty(transfer_glyphs):
    with pytest.raises(ValueError):
        lr_grid_search(small_model(), transfer_glyphs, [], cfg())


# ---------------------------------------------------------------------------
# enhancing / diminishing curation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ranked(transfer_glyphs):
    model = small_model("sculpt", seed=2)
    return model, image_mean_gates(model, transfer_glyphs.images)


@pytest.mark.parametrize("kind, sign", [("enhancing", 1), ("diminishing", -1)])
def test_extreme_selection(transfer_glyphs, ranked, kind, sign):
    model, mean = ranked
    cur = treatment_dataset(model, transfer_glyphs, kind, 5)
    assert np.array_equal(cur.dataset.counts(), np.full(transfer_glyphs.num_classes, 5))
    assert np.all(cur.source == sign)
    for c in range(transfer_glyphs.num_classes):
        idx = transfer_glyphs.indices(c)
        kept = cur.mean_gates[cur.dataset.labels == c]
        dropped = np.setdiff1d(mean[idx], kept)
        if sign > 0:
            assert kept.min() >= dropped.max()
        else:
            assert kept.max() <= dropped.min()


def test_constant_regulator_flags_ties(transfer_glyphs):
    model = small_model("sculpt")
    for name in model.params:
        if name.startswith("reg.out.") and name.endswith(".w"):
            model.params[name][...] = 0.0
    assert treatment_dataset(model, transfer_glyphs, "enhancing", 5).ties
    assert not treatment_dataset(small_model("sculpt", seed=2), transfer_glyphs, "enhancing", 5).ties


def test_mixed_composition_recount(transfer_glyphs, ranked):
    model, mean = ranked
    top = treatment_dataset(model, transfer_glyphs, "enhancing", 5)
    top_sets = [set(top.mean_gates[top.dataset.labels == c].tolist()) for c in range(transfer_glyphs.num_classes)]
    n_top = []
    for seed in range(60):
        cur = treatment_dataset(model, transfer_glyphs, "mixed", 5, seed=seed)
        for c, top_c in enumerate(top_sets):
            sel = cur.dataset.labels == c
            kept = cur.mean_gates[sel].tolist()
            assert len(kept) == 5 and len(set(kept)) == 5
            n_top.append(int((cur.source[sel] == 1).sum()))
            # recount pool membership from the enhancing ranking itself
            assert sum(v in top_c for v in kept) == n_top[-1]
    # each class is Binomial(5, 0.5), so the pooled count is Binomial(5 * n, 0.5)
    assert binomtest(sum(n_top), 5 * len(n_top), 0.5).pvalue > 1e-3


def test_curation_rejects_small_pool(transfer_glyphs, ranked):
    with pytest.raises(ValueError, match="fewer than"):
        treatment_dataset(ranked[0], transfer_glyphs, "enhancing", 13)
    with pytest.raises(ValueError, match="unknown"):
        treatment_dataset(ranked[0], transfer_glyphs, "neutral", 5)


@given(st.integers(0, 10_000))
def test_mixed_draws_are_within_the_extreme_pools(seed):
    rng = np.random.default_rng(seed)
    pool = 12
    ds = ImageDataset(rng.random((2 * pool, *SMALL_SHAPE)), np.repeat([0, 1], pool), ["a", "b"])
    model = small_model("sculpt", seed=seed % 5)
    mean = image_mean_gates(model, ds.images)
    cur = treatment_dataset(model, ds, "mixed", 4, seed=seed)
    for c in (0, 1):
        vals = np.sort(mean[ds.indices(c)])
        kept = cur.mean_gates[cur.dataset.labels == c]
        assert np.all((kept >= vals[-4]) | (kept <= vals[3]))


def test_predict_agrees_with_evaluate(transfer_glyphs):
    model = small_model("sculpt")
    x, y = transfer_glyphs.images[:9], transfer_glyphs.labels[:9] % 4
    assert evaluate(model, x, y) == float(np.mean(predict(model, x) == y))
