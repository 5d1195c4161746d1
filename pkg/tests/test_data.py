import hashlib

import numpy as np
import pytest
import torch
from PIL import Image

from dgnet.data import (
    CorruptImageError, SamplingError, load_dataset, make_toy_dataset, preprocess, sample_identity_batch,
    sample_pair, to_grayscale,
)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return make_toy_dataset(tmp_path_factory.mktemp("toy"), ids=4, imgs_per_id=8)


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_preprocess_resizes_and_scales(tmp_path):
    arr = np.full((20, 10, 3), 255, np.uint8)
    arr[:, :5, 0] = 0
    _write(tmp_path / "a.png", arr)
    out = preprocess(tmp_path / "a.png", (64, 32))
    assert out.shape == (3, 64, 32) and out.dtype == torch.float32
    assert out.min() >= 0 and out.max() <= 1
    assert out[1].min() == 1.0


def test_preprocess_flip_is_seeded():
    arr = np.zeros((8, 4, 3), np.uint8)
    arr[:, 0] = 255
    outs = [preprocess(arr, (8, 4), train_mode=True, rng=np.random.default_rng(s)) for s in range(20)]
    flipped = [o[0, 0, -1].item() == 1.0 for o in outs]
    assert any(flipped) and not all(flipped)
    again = [preprocess(arr, (8, 4), train_mode=True, rng=np.random.default_rng(s)) for s in range(20)]
    assert all(torch.equal(a, b) for a, b in zip(outs, again))
    with pytest.raises(ValueError):
        preprocess(arr, (8, 4), train_mode=True)


def test_corrupt_image_raises(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(CorruptImageError):
        preprocess(bad, (8, 4))


def test_grayscale_shape():
    assert to_grayscale(torch.rand(3, 8, 4)).shape == (1, 8, 4)


def test_toy_dataset_layout_and_labels(toy):
    ds = load_dataset(toy, "folder_per_id", size=(64, 32))
    assert ds.num_identities == 4 and ds.num_images == 32
    assert sorted(set(ds.labels())) == [1, 2, 3, 4]
    assert set(ds.cameras()) == {1, 2}
    img = ds[0]
    assert img.pixels.shape == (3, 64, 32) and img.identity == 1


def test_toy_layouts_agree(toy):
    a = load_dataset(toy, "folder_per_id", size=(64, 32))
    b = load_dataset(toy, "manifest", size=(64, 32))
    key = lambda ds: sorted((r.path.split("/")[-1], r.identity, r.camera) for r in ds.records)
    assert key(a) == key(b)


def test_toy_is_deterministic_and_guarded(tmp_path):
    make_toy_dataset(tmp_path / "a", seed=3)
    make_toy_dataset(tmp_path / "b", seed=3)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    make_toy_dataset(tmp_path / "c", seed=4)
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")
    with pytest.raises(FileExistsError):
        make_toy_dataset(tmp_path / "a", seed=3)
    make_toy_dataset(tmp_path / "a", seed=3, force=True)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_toy_identity_fixes_torso_colour(toy):
    ds = load_dataset(toy, "folder_per_id", size=(64, 32))
    # the median colour of the most saturated pixels should separate identities
    def signature(px):
        arr = px.permute(1, 2, 0).reshape(-1, 3).numpy()
        sat = arr.max(1) - arr.min(1)
        return np.median(arr[sat > 0.4], axis=0)
    sigs = {i: [signature(ds.pixels(n)) for n in ds.indices_of(i)] for i in ds.identities}
    within = max(np.abs(s - sigs[i][0]).max() for i in sigs for s in sigs[i])
    between = min(np.abs(sigs[i][0] - sigs[j][0]).max() for i in sigs for j in sigs if i < j)
    assert within < between


def test_market_names_and_junk(tmp_path):
    arr = np.zeros((16, 8, 3), np.uint8)
    for name in ["0002_c1s1_000001_00.jpg", "0002_c2s1_000002_00.jpg", "0007_c1s1_000003_00.jpg",
                 "-1_c3s1_000004_00.jpg", "garbage.jpg"]:
        _write(tmp_path / name, arr)
    ds = load_dataset(tmp_path, "market_names", size=(16, 8))
    assert ds.num_images == 4
    assert sorted(ds.labels().tolist()) == [-1, 1, 1, 2]
    assert sorted(ds.raw_labels().tolist()) == [-1, 2, 2, 7]
    raw = load_dataset(tmp_path, "market_names", size=(16, 8), relabel=False)
    assert sorted(raw.labels().tolist()) == [-1, 2, 2, 7]


def test_verify_skips_corrupt(tmp_path):
    _write(tmp_path / "0001" / "0001_c1s1_000001_00.png", np.zeros((8, 4, 3), np.uint8))
    (tmp_path / "0001" / "0001_c2s1_000002_00.png").write_bytes(b"junk")
    assert load_dataset(tmp_path, "folder_per_id", size=(8, 4)).num_images == 2
    assert load_dataset(tmp_path, "folder_per_id", size=(8, 4), verify=True).num_images == 1


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    with pytest.raises(ValueError):
        load_dataset(tmp_path, "unknown_layout")
    with pytest.raises(ValueError):
        load_dataset(tmp_path, "folder_per_id")


def test_pair_sampling(toy):
    ds = load_dataset(toy, "folder_per_id", size=(64, 32))
    rng = np.random.default_rng(0)
    for _ in range(50):
        same = sample_pair(ds, "same_id", rng)
        assert same.first.identity == same.second.identity and same.first.path != same.second.path
        cross = sample_pair(ds, "cross_id", rng)
        assert cross.first.identity != cross.second.identity
    with pytest.raises(ValueError):
        sample_pair(ds, "other", rng)


def test_pair_sampling_errors(tmp_path):
    _write(tmp_path / "0001" / "0001_c1s1_000001_00.png", np.zeros((8, 4, 3), np.uint8))
    ds = load_dataset(tmp_path, "folder_per_id", size=(8, 4))
    rng = np.random.default_rng(0)
    with pytest.raises(SamplingError):
        sample_pair(ds, "same_id", rng)
    with pytest.raises(SamplingError):
        sample_pair(ds, "cross_id", rng)


def test_identity_batch_layout(toy):
    ds = load_dataset(toy, "folder_per_id", size=(64, 32))
    labels = ds.labels()
    rng = np.random.default_rng(1)
    for _ in range(100):
        idx = sample_identity_batch(ds, 4, rng)
        y = labels[idx]
        assert len(set(idx)) == 4
        assert all(y[n] == y[n ^ 1] for n in range(4))
        assert all(y[n] != np.roll(y, 2)[n] for n in range(4))
    with pytest.raises(SamplingError):
        sample_identity_batch(ds, 10, rng)
    with pytest.raises(ValueError):
        sample_identity_batch(ds, 5, rng)
