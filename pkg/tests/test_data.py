import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mahnet.data import (
    BundleError, DatasetBundle, NiftiError, PairingError, SliceRecord, build_index, crc32c, decode_bundle,
    decode_png, encode_bundle, encode_png, extract_slices, identifier, normalize_slice, pair_by_identifier,
    patient_of, preprocess_dirs, read_bundle, read_volume, resize_label, resize_lanczos, synth_dataset,
    write_bundle, write_volume,
)
from mahnet.data.imaging import lanczos_kernel, overlay, resample_weights
from oracles import lanczos_ref


# -- NIfTI ----------------------------------------------------------------

def test_nifti_int16_roundtrip(tmp_path):
    data = np.arange(32, dtype=np.int16).reshape(4, 4, 2) * 37 - 500
    write_volume(tmp_path / "v.nii", data)
    vol = read_volume(tmp_path / "v.nii")
    assert vol.dims == (4, 4, 2) and vol.data.dtype == np.int16
    assert np.array_equal(vol.data, data)


def test_nifti_float_and_layout(tmp_path):
    data = np.random.default_rng(0).standard_normal((3, 5, 2)).astype(np.float32)
    write_volume(tmp_path / "f.nii", data)
    raw = (tmp_path / "f.nii").read_bytes()
    # x varies fastest on disk
    first = struct.unpack_from("<3f", raw, 352)
    assert first == tuple(data[:3, 0, 0].tolist())
    assert np.array_equal(read_volume(tmp_path / "f.nii").data, data)


def test_nifti_scaling(tmp_path):
    data = np.full((2, 2, 1), 3, dtype=np.int16)
    write_volume(tmp_path / "s.nii", data, scl_slope=2.0, scl_inter=1.0)
    assert np.all(read_volume(tmp_path / "s.nii").data == 7.0)


def test_nifti_rejects_bad_files(tmp_path):
    write_volume(tmp_path / "v.nii", np.zeros((4, 4, 2), np.int16))
    raw = bytearray((tmp_path / "v.nii").read_bytes())
    pair = bytearray(raw)
    pair[344:348] = b"ni1\0"
    (tmp_path / "pair.nii").write_bytes(pair)
    with pytest.raises(NiftiError, match="magic"):
        read_volume(tmp_path / "pair.nii")
    (tmp_path / "short.nii").write_bytes(raw[:-5])
    with pytest.raises(NiftiError, match="truncated"):
        read_volume(tmp_path / "short.nii")
    (tmp_path / "tiny.nii").write_bytes(raw[:100])
    with pytest.raises(NiftiError):
        read_volume(tmp_path / "tiny.nii")
    dt = bytearray(raw)
    struct.pack_into("<h", dt, 70, 64)
    (tmp_path / "dt.nii").write_bytes(dt)
    with pytest.raises(NiftiError, match="datatype"):
        read_volume(tmp_path / "dt.nii")
    with pytest.raises(ValueError):
        write_volume(tmp_path / "x.nii", np.zeros((2, 2, 2), np.float64))


def test_nifti_big_endian(tmp_path):
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    hdr = bytearray(348)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">2h", hdr, 70, 4, 16)
    struct.pack_into(">3f", hdr, 108, 352.0, 0.0, 0.0)
    hdr[344:348] = b"n+1\0"
    body = data.transpose(2, 1, 0).astype(">i2").tobytes()
    (tmp_path / "be.nii").write_bytes(bytes(hdr) + b"\0" * 4 + body)
    assert np.array_equal(read_volume(tmp_path / "be.nii").data, data)


# -- slices and resizing --------------------------------------------------

def test_normalize_examples():
    assert normalize_slice(np.array([[0, 100, 200]])).tolist() == [[0, 128, 255]]
    assert not normalize_slice(np.full((3, 3), 42.0)).any()
    vol = np.zeros((3, 2, 4))
    for z in range(4):
        vol[:, :, z] = z + np.arange(6).reshape(3, 2)
    sl = extract_slices(vol)
    assert len(sl) == 4 and sl[0].shape == (2, 3)
    assert sl[0][0, 0] == 0 and sl[0][1, 2] == 255


def test_lanczos_kernel_values():
    k = lanczos_ref()
    xs = np.linspace(-3.5, 3.5, 57)
    assert np.allclose(lanczos_kernel(xs), [k(x) for x in xs], atol=1e-15)
    assert np.all(lanczos_kernel(np.array([-2.0, -1.0, 1.0, 2.0, 3.0])) == 0)


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_resize_identity_and_bounds(img):
    assert np.array_equal(resize_lanczos(img, *img.shape), img)
    out = resize_lanczos(img.astype(np.float64) * 10.0, 7, 9)
    assert out.min() >= 0.0 and out.max() <= 255.0


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 40), st.integers(1, 40))
def test_resize_constant(h, w, oh, ow):
    out = resize_lanczos(np.full((h, w), 128, np.uint8), oh, ow)
    assert out.shape == (oh, ow) and np.all(out == 128)


def direct_resize_1d(row, n_out):
    k = lanczos_ref()
    n_in = len(row)
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    out = []
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        ws = [k((j - src) / stretch) for j in range(n_in)]
        out.append(sum(w * v for w, v in zip(ws, row)) / sum(ws))
    return np.array(out)


def test_ramp_against_weighted_sum():
    ramp = np.array([[0, 85, 170, 255]], np.uint8)
    got = resize_lanczos(ramp, 1, 8).astype(int)[0]
    ref = np.clip(direct_resize_1d([0, 85, 170, 255], 8), 0, 255)
    assert np.abs(got - ref).max() <= 1.0


def test_resize_float_matches_separable_oracle():
    rng = np.random.default_rng(2)
    img = rng.uniform(40, 200, (9, 13))
    out = resize_lanczos(img, 5, 20)
    cols = np.stack([direct_resize_1d(img[:, c], 5) for c in range(13)], axis=1)
    ref = np.clip(np.stack([direct_resize_1d(cols[r], 20) for r in range(5)]), 0, 255)
    assert np.abs(out - ref).max() <= 1e-9
    assert np.allclose(resample_weights(7, 3).sum(1), 1.0)
    with pytest.raises(ValueError):
        resize_lanczos(np.zeros((0, 3), np.uint8), 2, 2)


def test_label_resize_and_png():
    lab = np.zeros((8, 8), np.uint8)
    lab[2:6, 2:6] = 1
    up = resize_label(lab, 16, 16)
    assert set(np.unique(up)) <= {0, 1} and up[4:12, 4:12].all() and not up[0].any()
    img = np.random.default_rng(0).integers(0, 256, (5, 7), dtype=np.uint8)
    assert np.array_equal(decode_png(encode_png(img)), img)
    rgb = overlay(img, lab[:5, :7])
    assert rgb.shape == (5, 7, 3) and np.array_equal(rgb[0, 0], [img[0, 0]] * 3)


# -- pairing --------------------------------------------------------------

def test_pairing_examples():
    res = pair_by_identifier(["a/p01_s1.png"], ["b/p01_s1.png"])
    assert [p[0] for p in res.pairs] == ["p01"] and not res.unmatched
    res = pair_by_identifier(["p02_img.nii"], [])
    assert not res.pairs and [p.name for p in res.unmatched] == ["p02_img.nii"]
    res = pair_by_identifier(["x1_i.nii", "x2_i.nii", "x3_i.nii"], ["x1_l.nii", "x3_l.nii"])
    assert [p[0] for p in res.pairs] == ["x1", "x3"] and [p.name for p in res.unmatched_images] == ["x2_i.nii"]
    with pytest.raises(PairingError):
        pair_by_identifier(["k_1.nii", "k_2.nii"], [])
    assert identifier("case7.nii") == "case7"
    assert identifier("c-12_img.nii", r"^c-(\d+)") == "12"
    assert patient_of("pat3-2") == "pat3" and patient_of("pat3") == "pat3"


# -- bundles --------------------------------------------------------------

def make_records(n=10, patients=3, seed=0):
    rng = np.random.default_rng(seed)
    return [SliceRecord(rng.integers(0, 256, (6, 5), dtype=np.uint8), (rng.random((6, 5)) < 0.3).astype(np.uint8),
                        f"case{i}", f"pat{i * patients // n}", i % 4) for i in range(n)]


def test_crc32c_check_value():
    assert crc32c(b"123456789") == 0xE3069283
    assert crc32c(b"") == 0
    assert crc32c(b"6789", crc32c(b"12345")) == 0xE3069283


def test_bundle_roundtrip(tmp_path):
    recs = make_records()
    write_bundle(recs, tmp_path / "b.ulsb")
    back = read_bundle(tmp_path / "b.ulsb")
    assert back.records == recs and back.version == 1
    assert back.index == build_index(recs)
    assert len(back.index) == 3
    covered = sorted(i for runs in back.index.values() for s, n in runs for i in range(s, s + n))
    assert covered == list(range(10))
    assert [r.case_id for r in back.patient_records("pat0")] == ["case0", "case1", "case2", "case3"]
    assert encode_bundle(back.records) == (tmp_path / "b.ulsb").read_bytes()


def test_bundle_corruption():
    blob = bytearray(encode_bundle(make_records()))
    assert blob[:4] == b"ULSB"
    for pos in (4, 20, len(blob) // 2, len(blob) - 5):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(BundleError, match="(?i)crc|checksum"):
            decode_bundle(bytes(bad))
    with pytest.raises(BundleError):
        decode_bundle(bytes(blob[:10]))
    with pytest.raises(BundleError):
        decode_bundle(b"XXXX" + bytes(blob[4:]))


def test_bundle_version_check():
    blob = bytearray(encode_bundle(make_records(2, 1)))
    struct.pack_into("<I", blob, 4, 99)
    body = bytes(blob[:-4])
    blob = body + struct.pack("<I", crc32c(body))
    with pytest.raises(BundleError, match="version"):
        decode_bundle(blob)


def test_interleaved_patients_index():
    recs = make_records(4, 2)
    recs = [recs[0], recs[2], recs[1], recs[3]]
    idx = build_index(recs)
    assert idx == {"pat0": [(0, 1), (2, 1)], "pat1": [(1, 1), (3, 1)]}
    assert decode_bundle(encode_bundle(recs)).records == recs


def test_slice_record_validation():
    with pytest.raises(ValueError):
        SliceRecord(np.zeros((2, 2), np.float64), np.zeros((2, 2)), "a", "b")
    with pytest.raises(ValueError):
        SliceRecord(np.zeros((2, 2), np.uint8), np.full((2, 2), 3), "a", "b")


# -- synthetic data -------------------------------------------------------

def test_synth_deterministic():
    a = encode_bundle(synth_dataset(3, 8, 32, "mixed").records)
    b = encode_bundle(synth_dataset(3, 8, 32, "mixed").records)
    assert a == b
    assert a != encode_bundle(synth_dataset(4, 8, 32, "mixed").records)


@pytest.mark.parametrize("kind", ["disk", "ellipse", "blob"])
def test_synth_labels_and_contrast(kind):
    ds = synth_dataset(11, 12, 48, kind, contrast=0.35)
    for r in ds.records:
        assert r.image.shape == r.label.shape == (48, 48)
        assert r.label.any() and set(np.unique(r.label)) <= {0, 1}
        m = r.label.astype(bool)
        gap = r.image[m].mean() / 255.0 - r.image[~m].mean() / 255.0
        assert abs(gap - 0.35) <= 1.0 / 255.0
    assert len(ds.index) == 3
    with pytest.raises(ValueError):
        synth_dataset(0, 2, 32, "square")


# -- preprocessing --------------------------------------------------------

def write_case(root, name, shape=(20, 12, 3), seed=0):
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    write_volume(root / "images" / f"{name}_img.nii", rng.integers(-200, 900, shape).astype(np.int16))
    lab = np.zeros(shape, np.int16)
    lab[5:12, 3:8, :] = 1
    write_volume(root / "labels" / f"{name}_lab.nii", lab)


def test_preprocess_dirs(tmp_path):
    write_case(tmp_path, "p1-1", seed=1)
    write_case(tmp_path, "p1-2", seed=2)
    write_case(tmp_path, "p2-1", (16, 16, 2), seed=3)
    (tmp_path / "images" / "lonely_img.nii").write_bytes(b"")
    recs, summary = preprocess_dirs(tmp_path / "images", tmp_path / "labels", size=32)
    assert summary.volumes == 3 and summary.slices == len(recs) == 8
    assert summary.patients == 2 and len(summary.unmatched) == 1
    assert all(r.image.shape == (32, 32) and r.label.any() for r in recs)
    again, _ = preprocess_dirs(tmp_path / "images", tmp_path / "labels", size=32)
    assert encode_bundle(again) == encode_bundle(recs)


def test_preprocess_collects_errors(tmp_path):
    write_case(tmp_path, "ok")
    (tmp_path / "images" / "bad_img.nii").write_bytes(b"\0" * 400)
    (tmp_path / "labels" / "bad_lab.nii").write_bytes(b"\0" * 400)
    recs, summary = preprocess_dirs(tmp_path / "images", tmp_path / "labels", size=16)
    assert summary.volumes == 1 and len(summary.errors) == 1 and "bad_img" in summary.errors[0]["file"]
    recs, summary = preprocess_dirs(tmp_path / "nope", tmp_path / "nope2", size=16)
    assert recs == [] and summary.volumes == 0
