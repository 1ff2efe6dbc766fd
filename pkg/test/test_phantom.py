import numpy as np
import pytest

from src.dataset import make_phantom_cases
from src.errors import DataError
from src.phantom import PhantomSpec, generate_phantom, load_case_presets, spec_from_preset
from src.volume import derive_boundary


@pytest.fixture(scope="module")
def phantom64():
    return generate_phantom(PhantomSpec(shape=(64, 64, 64), seed=7))


def test_all_33_labels_present(phantom64):
    vol, lab = phantom64
    assert set(np.unique(lab.labels).tolist()) == set(range(33))
    assert vol.shape == lab.shape == (64, 64, 64)


def test_intensity_within_hu_window(phantom64):
    vol, lab = phantom64
    assert vol.voxels.min() >= -1000.0 and vol.voxels.max() <= 8000.0
    # 치아는 배경보다 밝다
    assert vol.voxels[lab.labels > 0].mean() > vol.voxels[lab.labels == 0].mean()


def test_boundary_is_sparse(phantom64):
    _, lab = phantom64
    frac = derive_boundary(lab).positive_fraction
    assert 0.0 < frac < 0.05


def test_deterministic_for_same_seed():
    spec = PhantomSpec(shape=(32, 32, 32), seed=3)
    v1, l1 = generate_phantom(spec)
    v2, l2 = generate_phantom(spec)
    assert np.array_equal(v1.voxels, v2.voxels)
    assert np.array_equal(l1.labels, l2.labels)


def test_all_teeth_missing_gives_background_only():
    _, lab = generate_phantom(PhantomSpec(shape=(32, 32, 32), missing_teeth=range(1, 33), seed=1))
    assert not lab.labels.any()


def test_missing_teeth_absent():
    missing = {1, 16, 17, 32}
    _, lab = generate_phantom(PhantomSpec(shape=(64, 64, 64), missing_teeth=missing, seed=2))
    present = set(np.unique(lab.labels).tolist())
    assert not (present & missing)


def test_too_small_shape_rejected():
    with pytest.raises(DataError):
        generate_phantom(PhantomSpec(shape=(16, 16, 16)))
    with pytest.raises(DataError):
        generate_phantom(PhantomSpec(shape=(64, 64, 8)))


@pytest.mark.parametrize("kw", [
    {"missing_teeth": [33]},
    {"spacing": (0.4, -0.4, 0.4)},
    {"noise_sigma": -1.0},
    {"shape_variation": -0.5},
])
def test_invalid_spec(kw):
    with pytest.raises(DataError):
        PhantomSpec(**kw)


def test_presets_load_and_apply():
    presets = load_case_presets()
    names = [p["name"] for p in presets]
    assert names[0] == "normal" and "missing" in names
    spec = spec_from_preset(presets[names.index("missing")], PhantomSpec(), seed=9)
    assert spec.missing_teeth == frozenset({1, 16, 17, 32})
    assert spec.seed == 9


def test_shape_depends_on_seed():
    _, a = generate_phantom(PhantomSpec(shape=(64, 64, 64), seed=11))
    _, b = generate_phantom(PhantomSpec(shape=(64, 64, 64), seed=12))
    assert not np.array_equal(a.labels, b.labels)
    # 치아 수는 같다
    assert set(np.unique(a.labels).tolist()) == set(np.unique(b.labels).tolist())


def test_zero_shape_variation_fixes_geometry():
    _, a = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=1, shape_variation=0.0))
    _, b = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=2, shape_variation=0.0))
    assert np.array_equal(a.labels, b.labels)


def test_held_out_cases_differ_from_training_cases():
    train = make_phantom_cases(2, "train", 0, (32, 32, 32))
    test = make_phantom_cases(2, "test", 0, (32, 32, 32))
    for tr, te in zip(train, test):
        assert tr.name.split("-", 2)[2] == te.name.split("-", 2)[2]
        assert not np.array_equal(tr.labels.labels, te.labels.labels)
