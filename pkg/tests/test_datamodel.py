import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_sample
from pipeloc.datamodel import (
    FeatureSequence,
    Manifest,
    ManifestEntry,
    concat_features,
    pad_batch,
    read_feature_file,
    read_manifest,
    split_features,
    validate_sample,
    write_feature_file,
    write_manifest,
)
from pipeloc.errors import DataError, FormatError, TruncationError
from pipeloc.synthgen import GenConfig, generate_video


def test_duplicate_points_flagged():
    s = make_sample(T=10, points=[5, 5])
    assert any("points strictly increasing" in v for v in validate_sample(s))


def test_empty_interval_flagged():
    s = make_sample(T=10, intervals=[(3, 3)])
    assert any("start < end" in v for v in validate_sample(s))


def test_point_outside_every_interval_flagged():
    s = make_sample(T=10, points=[1], intervals=[(4, 6)])
    assert any("inside 0 intervals" in v for v in validate_sample(s))


def test_nonzero_padding_flagged():
    s = make_sample(T=6, n_pad=2)
    st_ = np.array(s.features.static_feat)
    st_[-1, 0] = 1.0
    bad = s.replace(features=FeatureSequence(st_, s.features.dynamic_feat, s.features.vo_feat,
                                             s.features.valid_mask))
    assert any("padded rows" in v for v in validate_sample(bad))


def test_nan_flagged_and_validator_never_raises():
    s = make_sample(T=4)
    dy = np.array(s.features.dynamic_feat)
    dy[0, 0] = np.nan
    bad = s.replace(features=FeatureSequence(s.features.static_feat, dy, s.features.vo_feat,
                                             s.features.valid_mask))
    out = validate_sample(bad)
    assert any("NaN" in v for v in out)
    assert validate_sample(bad) == out


def test_generated_sample_is_valid():
    s = generate_video(GenConfig(), 0)
    assert validate_sample(s) == []


def test_feature_arrays_are_read_only():
    s = make_sample()
    with pytest.raises(ValueError):
        s.features.static_feat[0, 0] = 3.0


def test_round_trip_small(tmp_path):
    s = make_sample(T=10, D=4, D_vo=2)
    p = tmp_path / "a.pspo"
    write_feature_file(s, p)
    assert read_feature_file(p) == s.features


@st.composite
def feature_sequences(draw):
    T = draw(st.integers(1, 20))
    D = draw(st.integers(1, 5))
    Dvo = draw(st.integers(1, 4))
    floats = st.floats(-1e6, 1e6, width=32, allow_nan=False)
    mask = draw(arrays(bool, T))
    mask[0] = True
    blocks = [draw(arrays(np.float32, (T, w), elements=floats)) for w in (D, D, Dvo)]
    for b in blocks:
        b[~mask] = 0
    return FeatureSequence(*blocks, mask)


@given(feature_sequences())
def test_round_trip_bit_exact(tmp_path_factory, fs):
    p = tmp_path_factory.mktemp("rt") / "x.pspo"
    write_feature_file(fs, p)
    back = read_feature_file(p)
    assert back == fs
    assert p.read_bytes()[:4] == b"PSPO"


@given(arrays(np.float32, st.tuples(st.integers(1, 10), st.integers(1, 6)),
              elements=st.floats(-10, 10, width=32)))
def test_concat_split_inverse(a):
    b = a[:, ::-1].copy()
    s, d = split_features(concat_features(a, b))
    assert np.array_equal(s, a) and np.array_equal(d, b)


def _header(magic=b"PSPO", version=1, T=2, D=1, Dvo=1):
    return struct.pack("<4sHIII", magic, version, T, D, Dvo)


def test_bad_magic_reports_offset(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(_header(magic=b"NOPE") + b"\0" * 100)
    with pytest.raises(FormatError, match="offset 0"):
        read_feature_file(p)


def test_bad_version_reports_offset(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(_header(version=7) + b"\0" * 100)
    with pytest.raises(FormatError, match="offset 4"):
        read_feature_file(p)


def test_truncated_payload(tmp_path):
    s = make_sample(T=100, D=3, D_vo=2)
    p = tmp_path / "x"
    write_feature_file(s, p)
    raw = p.read_bytes()
    # keep the header claiming T=100 but only 50 rows of the first block
    p.write_bytes(raw[:18 + 50 * 3 * 4])
    with pytest.raises(TruncationError):
        read_feature_file(p)


def test_short_header(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"PSP")
    with pytest.raises(TruncationError):
        read_feature_file(p)


def test_trailing_bytes_and_bad_mask(tmp_path):
    s = make_sample(T=3, D=1, D_vo=1)
    p = tmp_path / "x"
    write_feature_file(s, p)
    raw = p.read_bytes()
    p.write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        read_feature_file(p)
    p.write_bytes(raw[:-1] + b"\x02")
    with pytest.raises(FormatError):
        read_feature_file(p)


def test_manifest_round_trip(tmp_path):
    s = make_sample(T=5, points=[1], intervals=[(0, 3)])
    write_feature_file(s, tmp_path / "v0.pspo")
    m = Manifest([ManifestEntry("v0", "v0.pspo", 3.0, "test", [1], [[0, 3]])], 4, 2, tmp_path)
    write_manifest(m, tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert back.load_split("test")[0] == s
    assert back.split("train_labeled") == []


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        read_manifest(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"videos": [{"id": 1}]}')
    with pytest.raises(DataError, match="malformed"):
        read_manifest(tmp_path / "bad.json")


def test_manifest_dim_mismatch(tmp_path):
    s = make_sample(T=5, D=4)
    write_feature_file(s, tmp_path / "v0.pspo")
    m = Manifest([ManifestEntry("v0", "v0.pspo", 3.0, "val")], 8, 2, tmp_path)
    with pytest.raises(DataError, match="do not match"):
        m.load(m.entries[0])


def test_pad_batch_zero_pads():
    a, b = make_sample(T=3, seed=1), make_sample(T=5, seed=2)
    x, vo, mask = pad_batch([a, b])
    assert x.shape == (2, 5, 8) and vo.shape == (2, 5, 2)
    assert mask.tolist() == [[True] * 3 + [False] * 2, [True] * 5]
    assert not x[0, 3:].any() and not vo[0, 3:].any()
    assert np.array_equal(x[1], b.features.concat())
