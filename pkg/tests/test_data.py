import itertools
import json

import numpy as np
import pytest
from conftest import SMALL_SHAPE, small_model
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from tsar.data.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tsar.data.datasets import load_image_folder, resize, save_image_folder, scarce_subset, synthetic_glyphs
from tsar.data.trace import RegulationTrace, TraceError, read_trace, write_trace

# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = small_model("grow", seed=3)
    path = save_checkpoint(model, {"note": "x", "lr": 0.01}, tmp_path / "m.ckpt")
    loaded, cfg = load_checkpoint(path)
    assert cfg == {"note": "x", "lr": 0.01}
    assert set(loaded.params) == set(model.params)
    for name, arr in model.params.items():
        assert loaded.params[name].dtype == arr.dtype
        assert loaded.params[name].tobytes() == arr.tobytes()
    assert loaded.frozen == model.frozen and loaded.mode == model.mode


def test_checkpoint_fp32_payload(tmp_path):
    model = small_model()
    loaded, _ = load_checkpoint(save_checkpoint(model, None, tmp_path / "m.ckpt", dtype="<f4"))
    for name, arr in model.params.items():
        assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.params[name], arr.astype(np.float32))


def test_checkpoint_array_order_is_sorted(tmp_path):
    raw = save_checkpoint(small_model(), None, tmp_path / "m.ckpt").read_bytes()
    names = sorted(small_model().params)
    positions = [raw.index(n.encode() + bytes([2])) for n in names]
    assert positions == sorted(positions)


@pytest.mark.parametrize("cut", [1, 9, 500])
def test_truncated_checkpoint_rejected(tmp_path, cut):
    path = save_checkpoint(small_model(), None, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert err.value.field == "checksum"


def test_flipped_byte_rejected(tmp_path):
    path = save_checkpoint(small_model(), None, tmp_path / "m.ckpt")
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_bump_rejected(tmp_path):
    path = save_checkpoint(small_model(), None, tmp_path / "m.ckpt")
    blob = bytearray(path.read_bytes())
    blob[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="unsupported version 2") as err:
        load_checkpoint(path)
    assert err.value.field == "version"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert err.value.field == "magic"


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


def make_trace(detail, steps=6, seed=0, tracked=None):
    rng = np.random.default_rng(seed)
    shapes = {"c1": (4, 3), "cp": (2, 5)}
    tr = RegulationTrace(detail, shapes, tracked=tracked or {}, weight_layers=("cp",) if detail != "summary" else ())
    for k in range(steps):
        gates = {layer: rng.random(shape) for layer, shape in shapes.items()}
        weights = {"cp": rng.normal(size=10)} if detail != "summary" else None
        tr.append(k, k // 3, k // 3, k % 3, gates, weights)
    return tr


@pytest.mark.parametrize("detail", ["summary", "tracked", "full"])
def test_trace_round_trip(tmp_path, detail):
    tracked = {"c1": np.array([0, 5, 11])} if detail == "tracked" else None
    tr = make_trace(detail, tracked=tracked)
    back = read_trace(write_trace(tr, tmp_path / "t.jsonl"))
    assert back == tr
    if detail != "summary":
        assert np.array_equal(back.gate_matrix("cp"), tr.gate_matrix("cp"))


def test_summary_trace_line_count(tmp_path):
    path = write_trace(make_trace("summary", steps=3000), tmp_path / "t.jsonl")
    assert len(path.read_text().splitlines()) == 3001


def test_tracked_recount(tmp_path):
    ids = {"c1": np.array([1, 2, 7, 9]), "cp": np.array([0])}
    path = write_trace(make_trace("tracked", tracked=ids), tmp_path / "t.jsonl")
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    for line in lines[1:]:
        rec = json.loads(line)
        for layer, gates in rec["gates"].items():
            assert len(gates) == len(header["tracked"][layer])


def test_detail_mismatch_names_line(tmp_path):
    path = write_trace(make_trace("full"), tmp_path / "t.jsonl")
    lines = path.read_text().splitlines()
    rec = json.loads(lines[3])
    del rec["gates"]
    lines[3] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceError, match="line 4"):
        read_trace(path)


def test_trace_rejects_non_increasing_steps():
    tr = make_trace("summary", steps=2)
    with pytest.raises(TraceError):
        tr.append(1, 0, 0, 9, {"c1": np.zeros(12), "cp": np.zeros(10)})


def test_summary_trace_has_no_gate_matrix():
    with pytest.raises(TraceError, match="summary"):
        make_trace("summary").gate_matrix("cp")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def test_glyphs_are_deterministic():
    a = synthetic_glyphs(5, 20, in_shape=SMALL_SHAPE, seed=11)
    b = synthetic_glyphs(5, 20, in_shape=SMALL_SHAPE, seed=11)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synthetic_glyphs(5, 20, in_shape=SMALL_SHAPE, seed=12).images)


def test_scarce_meta_dataset_contract():
    ds = synthetic_glyphs(25, 20, seed=0, split=(15, 5))
    assert ds.num_classes == 25 and ds.in_shape == (3, 28, 28)
    assert np.all(ds.counts("train") == 15) and np.all(ds.counts("test") == 5)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def pairwise_probe_accuracy(ds, n_train, lam=100.0):
    """Ridge probe (dual form) per class pair, trained on the first ``n_train`` images of each class."""
    x = np.column_stack([ds.images.reshape(len(ds), -1), np.ones(len(ds))])
    first = np.concatenate([np.arange(n) < n_train for n in ds.counts()])
    accs = []
    for a, b in itertools.combinations(range(ds.num_classes), 2):
        pair = (ds.labels == a) | (ds.labels == b)
        tr, te = pair & first, pair & ~first
        y = np.where(ds.labels == a, 1.0, -1.0)
        alpha = np.linalg.solve(x[tr] @ x[tr].T + lam * np.eye(tr.sum()), y[tr])
        accs.append(np.mean(np.sign(x[te] @ (x[tr].T @ alpha)) == y[te]))
    return np.array(accs)


@pytest.mark.parametrize("domain", [0, 1])
def test_glyph_classes_pairwise_linearly_separable(domain):
    accs = pairwise_probe_accuracy(synthetic_glyphs(10, 60, seed=21, domain=domain), 40)
    assert len(accs) == 45
    assert accs.mean() >= 0.9 and accs.min() >= 0.75


def test_scarce_subset_by_seed():
    full = synthetic_glyphs(40, 20, in_shape=SMALL_SHAPE, seed=0, split=(15, 5))
    a, b = scarce_subset(full, 25, seed=4), scarce_subset(full, 25, seed=4)
    assert a.class_names == b.class_names and a.num_classes == 25
    assert a.class_names != scarce_subset(full, 25, seed=5).class_names


def test_grayscale_replicated_to_three_channels(tmp_path):
    d = tmp_path / "data" / "a"
    d.mkdir(parents=True)
    img = (np.random.default_rng(0).random((28, 28)) * 255).astype(np.uint8)
    for i in range(3):
        Image.fromarray(img).save(d / f"{i}.png")
    ds = load_image_folder(tmp_path / "data", split_spec=None)
    assert ds.images.shape == (3, 3, 28, 28)
    assert np.array_equal(ds.images[0, 0], ds.images[0, 1]) and np.array_equal(ds.images[0, 0], ds.images[0, 2])
    np.testing.assert_allclose(ds.images[0, 0], img / 255.0)


def test_folder_round_trip_order_and_exclusion(tmp_path):
    ds = synthetic_glyphs(3, 20, in_shape=(3, 28, 28), seed=2)
    save_image_folder(ds, tmp_path / "f")
    small = tmp_path / "f" / "aaa_small"
    small.mkdir()
    Image.fromarray(np.zeros((28, 28), dtype=np.uint8)).save(small / "0.png")
    loaded = load_image_folder(tmp_path / "f", split_spec=(15, 5))
    assert loaded.class_names == sorted(ds.class_names)
    assert loaded.meta["excluded"] == ["aaa_small"]
    assert np.abs(loaded.images - ds.images).max() <= 0.5 / 255 + 1e-12
    again = load_image_folder(tmp_path / "f", split_spec=(15, 5))
    assert np.array_equal(again.images, loaded.images) and np.array_equal(again.is_train, loaded.is_train)


def test_empty_or_missing_folder_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_folder(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        load_image_folder(tmp_path / "empty")


def test_resize_to_larger_image(tmp_path):
    d = tmp_path / "data" / "a"
    d.mkdir(parents=True)
    Image.fromarray(np.full((14, 10, 3), 200, dtype=np.uint8)).save(d / "0.png")
    ds = load_image_folder(tmp_path / "data", split_spec=None)
    assert ds.images.shape == (1, 3, 28, 28)
    np.testing.assert_allclose(ds.images, 200 / 255)


@given(st.integers(0, 10_000), st.integers(2, 30), st.integers(2, 30))
def test_resize_idempotent_at_target_shape(seed, h, w):
    img = np.random.default_rng(seed).random((3, h, w))
    assert np.abs(resize(img, (h, w)) - img).max() <= 1e-6
    assert np.array_equal(resize(img, (h, w), "nearest"), img)


def test_unknown_resize_method():
    with pytest.raises(ValueError):
        resize(np.zeros((1, 4, 4)), (2, 2), "bicubic")


def test_malformed_json_names_line(tmp_path):
    path = write_trace(make_trace("full"), tmp_path / "t.jsonl")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2] + ["{oops"] + lines[3:]) + "\n")
    with pytest.raises(TraceError, match="line 3"):
        read_trace(path)
    path.write_text("not json\n")
    with pytest.raises(TraceError, match="line 1"):
        read_trace(path)
