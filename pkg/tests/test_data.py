import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxr_severity.data.manifest import (Manifest, SampleRecord, format_stats, manifest_stats,
                                        read_manifest, severity_from_zones, write_manifest)
from cxr_severity.data.pgm import read_pgm, to_raster, write_pgm
from cxr_severity.data.sampling import balanced_batches, epoch_length, split_by_patient
from cxr_severity.data.synthetic import blob_mask, generate_synthetic, read_blobs
from cxr_severity.data.transforms import (IDENTITY, AugmentDraw, augment, crop_rows, preprocess,
                                          random_draw, resample, validate_draw)
from cxr_severity.errors import (ConfigurationError, DataError, IneligibleSampleError, InputError,
                                 ParameterError, RangeError, RequestError)
from cxr_severity.rng import substream
from cxr_severity.tensor import Tensor


# -- labels -----------------------------------------------------------------


def test_severity_from_zones():
    assert severity_from_zones(2) == 1
    assert severity_from_zones(3) == 2
    assert [severity_from_zones(k) for k in range(1, 7)] == [1, 1, 2, 2, 2, 2]
    assert severity_from_zones(np.int64(4)) == 2
    with pytest.raises(IneligibleSampleError):
        severity_from_zones(0)
    for bad in (-1, 7):
        with pytest.raises(RangeError):
            severity_from_zones(bad)


# -- PGM ----------------------------------------------------------------------


def test_pgm_roundtrip_8_and_16_bit(tmp_path):
    rng = np.random.default_rng(0)
    a8 = rng.integers(0, 256, (7, 5)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", a8, 255, comment="hello\nworld")
    r, m = read_pgm(tmp_path / "a.pgm")
    assert m == 255 and r.dtype == np.uint8 and np.array_equal(r, a8)
    a16 = rng.integers(0, 65536, (4, 6)).astype(np.uint16)
    write_pgm(tmp_path / "b.pgm", a16, 65535)
    r, m = read_pgm(tmp_path / "b.pgm")
    assert m == 65535 and np.array_equal(r, a16)
    assert (tmp_path / "b.pgm").read_bytes()[-2:] == np.array([a16[-1, -1]], ">u2").tobytes()


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(InputError):
        read_pgm(tmp_path / "x.pgm")
    (tmp_path / "y.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(InputError):
        read_pgm(tmp_path / "y.pgm")


# -- preprocess ----------------------------------------------------------------


def bilinear_oracle(img, out_h, out_w):
    """Per-pixel half-pixel-centre bilinear sampling, edge-clamped."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_crop_rows_example():
    assert crop_rows(500) == 40


def test_preprocess_crops_normalizes_and_resamples():
    rng = np.random.default_rng(1)
    raster = rng.integers(0, 256, (50, 37)).astype(np.uint8)
    out = preprocess(raster, size=20, maxval=255)
    assert out.dims == (1, 20, 20)
    cropped = raster[crop_rows(50):].astype(np.float64) / 255
    assert np.abs(out.data[0] - bilinear_oracle(cropped, 20, 20)).max() < 1e-12


def test_preprocess_default_size_and_constant():
    c = 77
    out = preprocess(np.full((500, 400), c, dtype=np.uint8))
    assert out.dims == (1, 480, 480)
    assert np.all(out.data == c / 255)


def test_preprocess_errors():
    with pytest.raises(InputError):
        preprocess(np.zeros((0, 0), np.uint8))
    with pytest.raises(InputError):
        preprocess(np.zeros((12, 20), np.uint8))
    assert preprocess(np.zeros((13, 20), np.uint8), size=8).dims == (1, 8, 8)


def test_preprocess_16_bit():
    out = preprocess(np.full((30, 30), 65535, np.uint16), size=10, maxval=65535)
    assert np.all(out.data == 1.0)


def test_resample_identity_at_same_size():
    img = np.random.default_rng(2).random((9, 9))
    assert np.array_equal(resample(img, 9, 9), img)


# -- augment -------------------------------------------------------------------


def test_augment_identity_is_exact():
    img = np.random.default_rng(3).random((1, 16, 16))
    assert np.array_equal(augment(Tensor(img), IDENTITY).data, img)


def test_double_flip_is_identity():
    img = np.random.default_rng(4).random((1, 16, 16))
    flip = AugmentDraw(flip=True)
    once = augment(Tensor(img), flip).data
    assert np.array_equal(once[0], img[0, :, ::-1])
    assert np.array_equal(augment(Tensor(once), flip).data, img)


def test_intensity_clamps():
    img = np.full((1, 8, 8), 0.5)
    img[0, 2, 3] = 0.95
    out = augment(Tensor(img), AugmentDraw(intensity=0.10)).data
    assert out[0, 2, 3] == 1.0
    assert np.allclose(out[0, 0, 0], 0.6)


def test_augment_draw_validation():
    with pytest.raises(ParameterError):
        validate_draw(AugmentDraw(angle=11.0), 64)
    with pytest.raises(ParameterError):
        validate_draw(AugmentDraw(tx=6.5), 64)
    with pytest.raises(ParameterError):
        augment(Tensor(np.zeros((1, 8, 8))), AugmentDraw(zoom=1.2))
    validate_draw(AugmentDraw(tx=6.4, ty=-6.4, angle=-10, zoom=0.85, intensity=-0.1), 64)


def test_translation_fills_with_mean():
    img = np.zeros((1, 10, 10))
    img[0, :, :5] = 1.0
    out = augment(Tensor(img), AugmentDraw(tx=1.0)).data[0]
    # the first column now samples outside the image
    assert np.allclose(out[:, 0], 0.5)
    assert np.array_equal(out[:, 1:6], np.ones((10, 5)))


def test_rotation_about_centre_preserves_centre_pixel():
    img = np.random.default_rng(5).random((1, 9, 9))
    out = augment(Tensor(img), AugmentDraw(angle=7.0)).data
    assert abs(out[0, 4, 4] - img[0, 4, 4]) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 24))
def test_augment_range_and_dims(seed, size):
    rng = np.random.default_rng(seed)
    img = rng.random((1, size, size))
    out = augment(Tensor(img), random_draw(rng, size)).data
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- manifest ------------------------------------------------------------------


def _records(spec):
    # spec: list of (patient, zones)
    return [SampleRecord(f"img{i}.pgm", p, z) for i, (p, z) in enumerate(spec)]


def test_manifest_csv_roundtrip(tmp_path):
    m = Manifest([SampleRecord("a.pgm", "P1", 2, "train", 40, "M", "AP"),
                  SampleRecord("b.pgm", "P2", 5, "test", None, None, None)], tmp_path)
    write_manifest(m, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_bytes()
    assert text.startswith(b"image_path,patient_id,zones_opacified,split,age,sex,view\n")
    assert b"\r" not in text
    back = read_manifest(tmp_path / "m.csv")
    assert back.records == m.records


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        Manifest([SampleRecord("a", "P", 1), SampleRecord("a", "Q", 2)])
    (tmp_path / "bad.csv").write_text("path,patient\nx,y\n")
    with pytest.raises(InputError):
        read_manifest(tmp_path / "bad.csv")
    with pytest.raises(RangeError):
        SampleRecord("a", "P", 9)


def test_stats_count_patients_once():
    m = Manifest([SampleRecord("a", "P1", 1, age=40, sex="M", view="AP"),
                  SampleRecord("b", "P1", 1, age=40, sex="M", view="AP"),
                  SampleRecord("c", "P1", 4, age=40, sex="M", view=None)])
    s = manifest_stats(m)
    assert s["patients"] == 1 and s["images"] == 3
    assert s["age_mean"] == 40 and s["age_std"] == 0
    assert s["sex"] == {"M": 1, "F": 0}
    assert s["view"] == {"AP": 2, "PA": 0, "unknown": 1}
    assert s["age_histogram"]["40-49"] == 1
    assert "40.00 +/- 0.00" in format_stats(s)


def test_stats_population_std():
    m = Manifest([SampleRecord("a", "P1", 1, age=30), SampleRecord("b", "P2", 1, age=50)])
    assert manifest_stats(m)["age_std"] == 10.0


# -- splitting -----------------------------------------------------------------


def test_split_single_patient_all_test():
    m = Manifest(_records([("P1", 1), ("P1", 4), ("P1", 2)]))
    out = split_by_patient(m, 1, 0)
    assert len(out.split("test")) == 3 and not out.split("train")


def test_split_too_many_requested():
    m = Manifest(_records([("P1", 1), ("P2", 4)]))
    with pytest.raises(RequestError):
        split_by_patient(m, 3, 0)


def _random_manifest(rng, n_max=40):
    n = int(rng.integers(1, n_max))
    n_pat = int(rng.integers(1, n + 1))
    pats = rng.integers(0, n_pat, n)
    zones = rng.integers(1, 7, n)
    return Manifest([SampleRecord(f"i{i}", f"P{p}", int(z)) for i, (p, z) in
                     enumerate(zip(pats, zones))])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_split_patient_disjoint_and_minimal(seed):
    rng = np.random.default_rng(seed)
    m = _random_manifest(rng)
    k = int(rng.integers(0, len(m) + 1))
    out = split_by_patient(m, k, seed)
    train = {r.patient_id for r in out.split("train")}
    test = {r.patient_id for r in out.split("test")}
    assert not train & test
    assert len(out.split("test")) >= k
    assert len(out.split("train")) + len(out.split("test")) == len(m)
    # whole patients are added only until the count is first reached, so the
    # count before the last patient (at most the largest test patient) was < k
    sizes = [sum(r.patient_id == p for r in out.split("test")) for p in test]
    assert (not test) if k == 0 else len(out.split("test")) - max(sizes) < k
    assert split_by_patient(m, k, seed).records == out.records


# -- balanced batches ----------------------------------------------------------


def _leveled(n1, n2):
    recs = [SampleRecord(f"a{i}", f"A{i}", 1 + i % 2, "train") for i in range(n1)]
    recs += [SampleRecord(f"b{i}", f"B{i}", 3 + i % 4, "train") for i in range(n2)]
    return Manifest(recs)


def test_batches_example_100_40():
    m = _leveled(40, 100)
    batches = balanced_batches(m, 50, 0)
    assert len(batches) == 4 == epoch_length(100, 50)
    for b in batches:
        assert [r.level for r in b].count(1) == 25
        assert [r.level for r in b].count(2) == 25
    seen = {r.image_path for b in batches for r in b}
    assert all(r.image_path in seen for r in m.records)


def test_batches_errors():
    with pytest.raises(ConfigurationError):
        balanced_batches(_leveled(10, 10), 51, 0)
    with pytest.raises(DataError):
        balanced_batches(_leveled(0, 10), 4, 0)


def test_batches_deterministic_and_order_free():
    m = _leveled(13, 31)
    direct = balanced_batches(m, 10, 5, epoch=3)
    for e in range(3):
        balanced_batches(m, 10, 5, epoch=e)
    assert balanced_batches(m, 10, 5, epoch=3) == direct
    assert balanced_batches(m, 10, 5, epoch=4) != direct


# -- synthetic -----------------------------------------------------------------


def test_synthetic_deterministic_and_labelled(tmp_path):
    m1, blobs1 = generate_synthetic(25, image_size=32, rng_seed=9, out_dir=tmp_path / "a")
    m2, _ = generate_synthetic(25, image_size=32, rng_seed=9, out_dir=tmp_path / "b")
    assert [(r.image_path, r.patient_id, r.zones_opacified) for r in m1] == \
        [(r.image_path, r.patient_id, r.zones_opacified) for r in m2]
    for name in ("manifest.csv", "blobs.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for r in m1:
        assert (tmp_path / "a" / r.image_path).read_bytes() == \
            (tmp_path / "b" / r.image_path).read_bytes()
        assert 1 <= r.zones_opacified <= 6
        assert len(blobs1[r.image_path]) == r.zones_opacified
        assert len({b.zone for b in blobs1[r.image_path]}) == r.zones_opacified
    per_patient = {}
    for r in m1:
        per_patient[r.patient_id] = per_patient.get(r.patient_id, 0) + 1
    assert all(1 <= n <= 4 for n in per_patient.values())
    assert read_blobs(tmp_path / "a" / "blobs.csv") == blobs1


def test_synthetic_zone_distribution_and_level(tmp_path):
    m, _ = generate_synthetic(12, (0, 0, 1, 0, 0, 0), image_size=16, out_dir=tmp_path)
    assert all(r.zones_opacified == 3 and r.level == 2 for r in m)
    with pytest.raises(InputError):
        generate_synthetic(3, image_size=8, out_dir=tmp_path)


def test_blob_mask_covers_blob_peak(tmp_path):
    m, blobs = generate_synthetic(6, (0, 0, 0, 0, 0, 1), image_size=64, rng_seed=2,
                                  out_dir=tmp_path)
    for r in m:
        raster, mv = read_pgm(tmp_path / r.image_path)
        img = preprocess(raster, 64, mv).data[0]
        mask = blob_mask(blobs[r.image_path], 64, 64)
        assert mask.any()
        # blobs are bright: the masked region is brighter than the unmasked lung field
        assert img[mask].mean() > img[~mask].mean() + 0.1


def test_substreams_independent():
    a = substream(1, 2, 3).random(4)
    assert np.array_equal(a, substream(1, 2, 3).random(4))
    assert not np.array_equal(a, substream(1, 3, 2).random(4))


def test_to_raster_quantizes():
    assert to_raster(np.array([0.0, 0.5, 1.0, 1.5]), 255).tolist() == [0, 128, 255, 255]
