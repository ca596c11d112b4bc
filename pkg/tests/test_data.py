import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tversky3d import data
from tversky3d.data import SynthConfig
from tversky3d.errors import BadMagicError, ConfigError, HeaderMismatchError, TruncatedFileError
from tversky3d.loss import one_hot_planes

SMALL = SynthConfig(volume_shape=(16, 16, 16), foreground_fraction_target=0.01,
                    lesion_count_range=(1, 3), lesion_radius_range=(1.0, 2.0),
                    mimic_count_range=(0, 0), seed=3)


def test_deterministic():
    assert data.generate_subject(SMALL, 2) == data.generate_subject(SMALL, 2)
    assert data.generate_subject(SMALL, 2) != data.generate_subject(SMALL, 3)


def test_labels_binary_and_nonempty():
    vol = data.generate_subject(SMALL, 0)
    assert set(np.unique(vol.labels)) == {0, 1}
    g0, g1 = one_hot_planes(vol.labels)
    assert np.all(g0 + g1 == 1)
    assert np.all(np.isfinite(vol.image))


def test_noiseless_single_lesion_is_piecewise_constant():
    cfg = SynthConfig(volume_shape=(16, 16, 16), foreground_fraction_target=0.01,
                      lesion_count_range=(1, 1), lesion_radius_range=(2.0, 3.0),
                      noise_sigma=0.0, contrast_jitter=(1.0, 1.0), mimic_count_range=(0, 0), seed=1)
    vol = data.generate_subject(cfg, 0)
    inside = vol.labels.astype(bool)
    for c, (bg, les) in enumerate(cfg.channel_contrasts):
        assert np.all(vol.image[~inside, c] == np.float32(bg))
        assert np.all(vol.image[inside, c] == np.float32(les))


def test_default_fraction_at_64():
    cfg = SynthConfig(volume_shape=(64, 64, 64))
    fracs = []
    for seed in range(10):
        cfg_s = SynthConfig(**{**cfg.to_dict(), "seed": seed})
        frac = data.generate_subject(cfg_s, 0).foreground_fraction
        assert 0.0004 <= frac <= 0.01
        fracs.append(frac)
    assert np.mean(fracs) < 0.01


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 50))
def test_realized_fraction_within_window(seed, index):
    cfg = SynthConfig(seed=seed)
    frac = data.generate_subject(cfg, index).foreground_fraction
    assert 0.2 * cfg.foreground_fraction_target <= frac <= 5 * cfg.foreground_fraction_target


def test_lesions_that_cannot_fit():
    with pytest.raises(ConfigError, match="cannot fit"):
        SynthConfig(volume_shape=(8, 8, 8), lesion_radius_range=(2.0, 5.0))


@pytest.mark.parametrize("field,value", [("foreground_fraction_target", 0.6),
                                         ("foreground_fraction_target", 0.0),
                                         ("lesion_count_range", (3, 1)),
                                         ("channels", 2)])
def test_invalid_config(field, value):
    with pytest.raises(ConfigError):
        SynthConfig(**{field: value})


def test_config_dict_round_trip():
    assert SynthConfig.from_dict(SMALL.to_dict()) == SMALL


class TestSplit:
    def test_fifteen(self):
        a, b = data.two_fold_split(list(range(15)), seed=0)
        assert (len(a), len(b)) == (8, 7)

    def test_two(self):
        a, b = data.two_fold_split(["x", "y"], seed=1)
        assert len(a) == len(b) == 1

    @given(st.integers(2, 40), st.integers(0, 1000))
    def test_partition(self, n, seed):
        a, b = data.two_fold_split(list(range(n)), seed)
        assert sorted(a + b) == list(range(n))
        assert not set(a) & set(b)
        assert abs(len(a) - len(b)) <= 1
        assert data.two_fold_split(list(range(n)), seed) == (a, b)

    def test_too_few(self):
        with pytest.raises(ConfigError):
            data.two_fold_split(["only"], 0)


class TestVolumeFile:
    def test_round_trip(self, tmp_path):
        vol = data.generate_subject(SMALL, 1)
        path = tmp_path / "v.tvol"
        data.write_volume(path, vol)
        back = data.read_volume(path)
        assert back == vol
        assert back.image.dtype == np.float64
        assert back.image.tobytes() == vol.image.tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "v.tvol"
        data.write_volume(path, data.generate_subject(SMALL, 0))
        blob = path.read_bytes()
        assert blob[:5] == b"TVOL1"
        n = int.from_bytes(blob[5:9], "little")
        assert blob[9:9 + n].startswith(b'{"channels":3,"dtype":"float32"')
        assert len(blob) == 9 + n + 16 ** 3 * 3 * 4 + 16 ** 3

    def test_truncated(self, tmp_path):
        path = tmp_path / "v.tvol"
        data.write_volume(path, data.generate_subject(SMALL, 0))
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(TruncatedFileError):
            data.read_volume(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "v.tvol"
        path.write_bytes(b"NOPE!" + b"\0" * 20)
        with pytest.raises(BadMagicError, match="TVOL1"):
            data.read_volume(path)

    def test_dtype_mismatch(self, tmp_path):
        path = tmp_path / "v.tvol"
        data.write_volume(path, data.generate_subject(SMALL, 0))
        blob = path.read_bytes().replace(b'"dtype":"float32"', b'"dtype":"float64"')
        path.write_bytes(blob)
        with pytest.raises(HeaderMismatchError):
            data.read_volume(path)


class TestMimics:
    def test_labels_unchanged_and_outside_lesions(self):
        with_mimics = SynthConfig(**{**SMALL.to_dict(), "mimic_count_range": (3, 3)})
        a = data.generate_subject(SMALL, 4)
        b = data.generate_subject(with_mimics, 4)
        np.testing.assert_array_equal(a.labels, b.labels)
        changed = np.any(a.image != b.image, axis=-1)
        assert changed.any()
        assert not (changed & a.labels.astype(bool)).any()

    def test_mimic_offsets_follow_contrasts(self):
        cfg = SynthConfig(volume_shape=(16, 16, 16), foreground_fraction_target=0.01,
                          lesion_count_range=(1, 1), lesion_radius_range=(2.0, 2.5),
                          noise_sigma=0.0, contrast_jitter=(1.0, 1.0),
                          mimic_count_range=(1, 1), mimic_contrasts=(2.0, 0.0, -1.0), seed=2)
        vol = data.generate_subject(cfg, 0)
        bright = (vol.image[..., 0] == np.float32(2.0)) & (vol.labels == 0)
        assert bright.any()
        assert np.all(vol.image[bright, 1] == 0.0)
        assert np.all(vol.image[bright, 2] == np.float32(-1.0))

    def test_bad_mimic_config(self):
        with pytest.raises(ConfigError):
            SynthConfig(mimic_count_range=(2, 1))
        with pytest.raises(ConfigError):
            SynthConfig(mimic_count_range=(1, 2), mimic_contrasts=(1.0,))
