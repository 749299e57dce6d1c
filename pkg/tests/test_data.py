import numpy as np
import pytest

from fairvit.data import (
    DataError,
    Dataset,
    SyntheticSpec,
    attr_from_filename,
    augment,
    augment_batch,
    export_dataset,
    generate,
    load_manifest,
    split,
)
from fairvit.imaging import save_image


def test_generator_is_deterministic():
    spec = SyntheticSpec(n=60, image_size=16, seed=11)
    a, b = generate(spec), generate(spec)
    assert a.ids == b.ids
    for x, y in ((a.images, b.images), (a.scores, b.scores), (a.attrs, b.attrs), (a.cue_boxes, b.cue_boxes)):
        assert x.tobytes() == y.tobytes()
    assert generate(SyntheticSpec(n=60, image_size=16, seed=12)).images.tobytes() != a.images.tobytes()


def test_sample_invariants():
    ds = generate(SyntheticSpec(n=301, image_size=16, group_offset=0.8, seed=1))
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.scores.min() >= 1 and ds.scores.max() <= 5
    counts = np.bincount(ds.attrs, minlength=2)
    assert abs(int(counts[0]) - int(counts[1])) <= 1
    assert len(set(ds.ids)) == len(ds)


def test_unbiased_generator_has_equal_group_means():
    ds = generate(SyntheticSpec(n=2000, group_offset=0.0, seed=3, image_size=8))
    g0, g1 = ds.scores[ds.attrs == 0], ds.scores[ds.attrs == 1]
    se = np.sqrt(g0.var(ddof=1) / g0.size + g1.var(ddof=1) / g1.size)
    assert abs(g0.mean() - g1.mean()) <= 3 * se


def test_group_offset_shifts_scores_by_four_times_offset():
    # weights chosen so latent values stay inside [0, 1] apart from noise tails
    spec = SyntheticSpec(n=2000, image_size=8, local_cue_weight=0.25, global_cue_weight=0.25,
                         group_offset=0.5, cue_noise=0.02, seed=4)
    ds = generate(spec)
    diff = ds.scores[ds.attrs == 1].mean() - ds.scores[ds.attrs == 0].mean()
    # independent Monte-Carlo of the score formula
    rng = np.random.default_rng(100)
    m = 200_000
    u = rng.uniform(size=(2, m))
    noise = rng.normal(0, 0.02, m)
    latent0 = 0.25 * u[0] + 0.25 * u[1] + noise
    oracle = np.mean(1 + 4 * np.clip(latent0 + 0.5, 0, 1)) - np.mean(1 + 4 * np.clip(latent0, 0, 1))
    assert abs(oracle - 2.0) < 0.02
    assert abs(diff - oracle) < 0.06


def test_group_mean_difference_is_nondecreasing_in_offset():
    diffs = []
    for offset in (0.0, 0.25, 0.5):
        ds = generate(SyntheticSpec(n=2000, image_size=8, group_offset=offset, seed=9))
        diffs.append(ds.scores[ds.attrs == 1].mean() - ds.scores[ds.attrs == 0].mean())
    assert diffs[0] <= diffs[1] <= diffs[2]


def test_cue_boxes_locate_the_checker_patch():
    spec = SyntheticSpec(n=20, image_size=16, local_cue_weight=1.0, global_cue_weight=0.0, cue_noise=0.0, seed=2)
    ds = generate(spec)
    for img, (r0, c0, r1, c1), attr in zip(ds.images, ds.cue_boxes, ds.attrs):
        assert r1 - r0 == c1 - c0 == 4
        resid = np.abs(img - img.mean(axis=(1, 2), keepdims=True)).sum(axis=0)
        inside = resid[r0:r1, c0:c1].mean()
        mask = np.ones_like(resid, dtype=bool)
        mask[r0:r1, c0:c1] = False
        assert inside >= resid[mask].mean()


def test_tint_marker_is_linearly_recoverable():
    ds = generate(SyntheticSpec(n=600, image_size=16, seed=8))
    x = ds.images.mean(axis=(2, 3))
    x = np.column_stack([x, np.ones(len(x))])
    # plain logistic regression by gradient descent on the channel means
    w = np.zeros(x.shape[1])
    tr, te = slice(0, 400), slice(400, None)
    for _ in range(2000):
        p = 1 / (1 + np.exp(-x[tr] @ w))
        w -= 5.0 * x[tr].T @ (p - ds.attrs[tr]) / 400
    acc = np.mean(((x[te] @ w) > 0) == ds.attrs[te])
    assert acc >= 0.95


@pytest.mark.parametrize("field,value", [("n", 1), ("image_size", 3), ("cue_noise", -0.1),
                                         ("local_cue_weight", -1.0)])
def test_spec_validation_names_field(field, value):
    with pytest.raises(DataError, match=field):
        generate(SyntheticSpec(**{field: value}))


# --- split ------------------------------------------------------------------


def test_split_sizes_and_stratification():
    ds = generate(SyntheticSpec(n=1000, image_size=8, seed=0))
    parts = split(ds, seed=1)
    assert [len(p) for p in parts] == [600, 200, 200]
    assert [p.split for p in parts] == ["train", "val", "test"]
    overall = ds.attrs.mean()
    for p in parts:
        assert abs(p.attrs.sum() - overall * len(p)) <= 1
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids) == sorted(ds.ids)


def test_split_is_deterministic_per_seed():
    ds = generate(SyntheticSpec(n=100, image_size=8, seed=0))
    assert [p.ids for p in split(ds, seed=3)] == [p.ids for p in split(ds, seed=3)]
    assert [p.ids for p in split(ds, seed=3)] != [p.ids for p in split(ds, seed=4)]


def test_split_rejects_empty_group_and_bad_ratios():
    ds = generate(SyntheticSpec(n=20, image_size=8, seed=0))
    only0 = ds.subset(np.flatnonzero(ds.attrs == 0))
    with pytest.raises(DataError, match="group 1"):
        split(only0)
    with pytest.raises(DataError):
        split(ds, ratios=(0.5, 0.2, 0.2))


# --- augmentation ----------------------------------------------------------


class _FixedRng:
    """Stands in for a Generator: no flips, unit gains."""

    def random(self, n):
        return np.ones(n)

    def uniform(self, lo, hi, size):
        return np.ones(size)


def test_null_augmentation_is_identity():
    img = np.random.default_rng(0).uniform(0, 1, (3, 6, 6))
    np.testing.assert_array_equal(augment(img, _FixedRng()), img)


def test_flip_is_an_involution_and_output_clamped():
    img = np.random.default_rng(1).uniform(0, 1, (3, 5, 5))

    class FlipOnly(_FixedRng):
        def random(self, n):
            return np.zeros(n)

    np.testing.assert_array_equal(augment(augment(img, FlipOnly()), FlipOnly()), img)
    np.testing.assert_array_equal(augment(img, FlipOnly()), img[..., ::-1])
    bright = np.ones((4, 3, 5, 5))
    out = augment_batch(bright, np.random.default_rng(2))
    assert out.min() >= 0 and out.max() <= 1


def test_augment_statistics():
    rng = np.random.default_rng(3)
    imgs = np.full((4000, 3, 2, 2), 0.5)
    imgs[..., 0] = 0.2
    out = augment_batch(imgs, rng)
    flipped = out[:, 0, 0, 1] < out[:, 0, 0, 0]
    assert abs(flipped.mean() - 0.5) < 0.03
    gains = out[:, :, 1, 1] / 0.5
    gains = np.where(flipped[:, None], out[:, :, 1, 1] / 0.2, gains)
    assert gains.min() >= 0.9 and gains.max() <= 1.1


# --- manifest ---------------------------------------------------------------


def test_attr_from_filename():
    assert attr_from_filename("AF1031.jpg") == 0
    assert attr_from_filename("CM77.jpg") == 1
    with pytest.raises(DataError):
        attr_from_filename("X1.jpg")


def _write_manifest(tmp_path, rows, size=6):
    rng = np.random.default_rng(0)
    for _, fname, _, _ in rows:
        if not (tmp_path / fname).exists():
            save_image(rng.uniform(0, 1, (3, size, size)), tmp_path / fname)
    text = "id,filename,score,split\n" + "".join(",".join(map(str, r)) + "\n" for r in rows)
    (tmp_path / "manifest.csv").write_text(text)
    return tmp_path / "manifest.csv"


def test_manifest_loads_attrs_and_resizes(tmp_path):
    path = _write_manifest(tmp_path, [("a", "AF1031.png", 3.5, "train"), ("b", "CM77.png", 1.0, "train"),
                                      ("c", "AX.png", 5.0, "test")])
    parts = load_manifest(path, image_size=4)
    assert set(parts) == {"train", "test"}
    assert parts["train"].attrs.tolist() == [0, 1]
    assert parts["train"].images.shape == (2, 3, 4, 4)
    assert parts["test"].scores.tolist() == [5.0]


def test_manifest_unknown_prefix_names_the_row(tmp_path):
    path = _write_manifest(tmp_path, [("a", "AF1.png", 3.5, "train"), ("x", "X1.png", 2.0, "train")])
    with pytest.raises(DataError, match="row 3"):
        load_manifest(path)


def test_manifest_score_out_of_range(tmp_path):
    path = _write_manifest(tmp_path, [("a", "AF1.png", 5.5, "train")])
    with pytest.raises(DataError, match="outside"):
        load_manifest(path)


def test_manifest_missing_image_is_io_error(tmp_path):
    (tmp_path / "manifest.csv").write_text("id,filename,score,split\na,Anothere.png,2.0,train\n")
    with pytest.raises(OSError):
        load_manifest(tmp_path / "manifest.csv")


def test_export_round_trip(tmp_path):
    ds = generate(SyntheticSpec(n=30, image_size=8, seed=6))
    parts = dict(zip(("train", "val", "test"), split(ds)))
    export_dataset(parts, tmp_path)
    back = load_manifest(tmp_path / "manifest.csv")
    for name, orig in parts.items():
        got = back[name]
        order = [got.ids.index(i) for i in orig.ids]
        assert got.scores[order].tobytes() == orig.scores.tobytes()
        assert got.attrs[order].tolist() == orig.attrs.tolist()
        assert np.max(np.abs(got.images[order] - orig.images)) <= 0.5 / 255 + 1e-12


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(DataError):
        Dataset(["a", "a"], np.zeros((2, 3, 2, 2)), np.ones(2), np.zeros(2, dtype=int))
