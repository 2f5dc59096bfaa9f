import numpy as np
import pytest

from swtrunet.augment import (AugmentParams, AugmentSpec, Case, apply_augmentation, augment_dataset,
                              augment_volume, copy_rng, sample_params)
from swtrunet.errors import ConfigError
from swtrunet.metrics import dice
from swtrunet.volume import VolumeImage, VoxelMask, read_volume


def pair(rng, shape=(24, 20, 6)):
    labels = np.zeros(shape, np.uint8)
    labels[4:18, 3:15, 1:5] = 1
    labels[8:12, 6:10, 2:4] = 2
    return VolumeImage(rng.normal(size=shape) + labels), VoxelMask(labels, (1.0, 1.0, 2.0))


def small_cases(n, slices):
    z = np.zeros((2, 2, slices))
    return [Case(f"p{i:03d}", VolumeImage(z), VoxelMask(z.astype(np.uint8))) for i in range(n)]


def test_identity_spec(rng):
    v, m = pair(rng)
    spec = AugmentSpec.identity(flip_per_axis_p=0.0, noise_sigma_range=(0.0, 0.0))
    av, am = augment_volume(v, m, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(av.data, v.data)
    np.testing.assert_array_equal(am.labels, m.labels)


def test_flip_twice_is_involution(rng):
    v, m = pair(rng)
    p = AugmentParams(flip_axes=(1,))
    once = apply_augmentation(v, m, p, rng)
    twice = apply_augmentation(*once, p, rng)
    np.testing.assert_array_equal(twice[0].data, v.data)
    np.testing.assert_array_equal(twice[1].labels, m.labels)


def test_sampled_ranges():
    spec = AugmentSpec()
    rng = np.random.default_rng(0)
    draws = [sample_params(spec, rng) for _ in range(10_000)]
    angles = np.array([d.angle_deg for d in draws])
    assert angles.min() >= -20 and angles.max() <= 20
    shifts = np.array([d.shift for d in draws])
    assert np.all(np.abs(shifts) <= [32, 32, 16])
    assert np.abs(shifts).max(axis=0).tolist() == [32, 32, 16]
    events = np.mean([d.flip_event for d in draws])
    assert abs(events - 0.6) < 0.02
    # an event selects no axis with probability 0.5^3
    flipped = np.mean([bool(d.flip_axes) for d in draws])
    assert abs(flipped - 0.6 * (1 - 0.5**3)) < 0.02
    gammas = [d.gamma for d in draws if d.gamma is not None]
    assert min(gammas) >= 0.7 and max(gammas) <= 1.5
    assert abs(len(gammas) / 10_000 - 0.5) < 0.02


def test_flip_event_frequency_in_sampler():
    spec = AugmentSpec(flip_per_axis_p=1.0)
    rng = np.random.default_rng(2)
    freq = np.mean([bool(sample_params(spec, rng).flip_axes) for _ in range(10_000)])
    assert abs(freq - 0.6) < 0.02


def test_translation_axes_independent():
    rng = np.random.default_rng(3)
    shifts = np.array([sample_params(AugmentSpec(), rng).shift for _ in range(5000)], float)
    corr = np.corrcoef(shifts.T)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.05)


def test_labels_stay_in_set(rng):
    v, m = pair(rng)
    spec = AugmentSpec(translation_vox=(4, 4, 2))
    for k in range(10):
        _, am = augment_volume(v, m, spec, np.random.default_rng(k))
        assert set(np.unique(am.labels)) <= {0, 1, 2}


def test_image_mask_alignment_integer_geometry(rng):
    _, m = pair(rng)
    img = VolumeImage(m.liver.astype(float))
    p = AugmentParams(flip_axes=(0, 2), shift=(3, -2, 1))
    wv, wm = apply_augmentation(img, m, p, rng)
    assert dice(wv.data > 0.5, wm.liver) == 1.0


def test_image_mask_alignment_rotation(rng):
    _, m = pair(rng, (40, 40, 4))
    img = VolumeImage(m.liver.astype(float))
    wv, wm = apply_augmentation(img, m, AugmentParams(angle_deg=17.0, shift=(2, 1, 0)), rng)
    # bilinear vs nearest only disagree on boundary voxels
    assert dice(wv.data > 0.5, wm.liver) > 0.95


def test_noise_and_gamma_touch_image_only(rng):
    v, m = pair(rng)
    wv, wm = apply_augmentation(v, m, AugmentParams(gamma=1.3, noise_sigma=0.05), rng)
    np.testing.assert_array_equal(wm.labels, m.labels)
    assert not np.array_equal(wv.data, v.data)


def test_out_of_bounds_fill(rng):
    v, m = pair(rng)
    wv, wm = apply_augmentation(v, m, AugmentParams(shift=(5, 0, 0)), rng)
    assert np.all(wv.data[:5] == 0) and np.all(wm.labels[:5] == 0)


def test_paper_counts():
    mr = augment_dataset(small_cases(48, 64), AugmentSpec())
    assert len(mr) == 960 and len(mr.slice_index()) == 61_440
    ct = augment_dataset(small_cases(131, 1), AugmentSpec())
    assert len(ct) == 2_620


def test_slice_index_provenance():
    aug = augment_dataset(small_cases(2, 3), AugmentSpec(copies=2))
    idx = aug.slice_index()
    assert idx[:4] == [("p000", 0, 0), ("p000", 0, 1), ("p000", 0, 2), ("p000", 1, 0)]
    assert len(set(idx)) == len(idx)


def test_checksum_depends_on_seed_only(rng):
    v, m = pair(rng, (16, 16, 3))
    cases = [Case("a", v, m), Case("b", v, m)]
    spec = AugmentSpec(copies=3, translation_vox=(3, 3, 1), seed=5)
    first = augment_dataset(cases, spec).checksum()
    assert augment_dataset(cases, spec).checksum() == first
    assert augment_dataset(cases, AugmentSpec(copies=3, translation_vox=(3, 3, 1), seed=6)).checksum() != first


def test_order_independent_streams(rng):
    v, m = pair(rng, (16, 16, 3))
    spec = AugmentSpec(copies=2, translation_vox=(3, 3, 1))
    ab = augment_dataset([Case("a", v, m), Case("b", v, m)], spec)
    ba = augment_dataset([Case("b", v, m), Case("a", v, m)], spec)
    assert ab[3][0] == ba[1][0] == "b"
    np.testing.assert_array_equal(ab[3][2].data, ba[1][2].data)
    r1, r2 = copy_rng(0, "a", 1), copy_rng(0, "a", 1)
    assert r1.random() == r2.random()


def test_include_original(rng):
    v, m = pair(rng)
    aug = augment_dataset([Case("a", v, m)], AugmentSpec(copies=3, include_original=True))
    _, copy, ov, om = aug[0]
    assert copy == 0 and ov is v and om is m


def test_write_manifest(tmp_path, rng):
    v, m = pair(rng, (8, 8, 2))
    aug = augment_dataset([Case("a", v, m)], AugmentSpec(copies=2, translation_vox=(1, 1, 0)))
    manifest = aug.write(tmp_path)
    lines = manifest.read_text().splitlines()
    assert lines[0].split("\t") == ["patient_id", "copy", "slices", "image", "mask"]
    assert lines[2].startswith("a\t1\t2\t")
    np.testing.assert_array_equal(read_volume(tmp_path / "a_c001_mask.raw").labels, aug[1][3].labels)


@pytest.mark.parametrize("kw", [dict(flip_overall_p=1.5), dict(rotation_deg=(5.0, -5.0)),
                                dict(copies=0), dict(translation_vox=(1, 1)), dict(gamma_range=(0.0, 1.0))])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        AugmentSpec(**kw)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        augment_dataset([], AugmentSpec())
