import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import find_peaks

from m2ae.errors import DegenerateProfileError, DegenerateSignalError, FormatError, TooFewSubjectsError
from m2ae.signals import (DELAY_RANGE, HR_RANGE, SAMPLE_RATE, SEGMENT_LEN, Dataset, generate_subject,
                          load_dataset, make_dataset, resample, save_dataset, split_by_subject,
                          synthesize_pair, zscore)


def quiet(seed, **kw):
    return generate_subject(seed, noise_std=0.0, **kw)


def r_peaks(ecg):
    return find_peaks(ecg, height=0.6 * ecg.max(), distance=40)[0]


def autocorr_rate(x, fs=SAMPLE_RATE):
    """Beat rate in Hz from the strongest autocorrelation lag in the 45-115 bpm range."""
    x = x - x.mean()
    ac = np.correlate(x, x, "full")[len(x) - 1:]
    lo, hi = int(fs * 60 / 115), int(fs * 60 / 45)
    return fs / (lo + int(np.argmax(ac[lo:hi + 1])))


# -- profiles ---------------------------------------------------------------

def test_profiles_are_deterministic_and_in_range():
    assert generate_subject(42) == generate_subject(42)
    rates = [generate_subject(s).heart_rate_bpm for s in range(1000)]
    assert all(HR_RANGE[0] <= r <= HR_RANGE[1] for r in rates)
    assert len(set(rates)) == 1000
    delays = [generate_subject(s).ppg_delay_s for s in range(1000)]
    assert all(DELAY_RANGE[0] <= d <= DELAY_RANGE[1] for d in delays)


def test_pinned_fields_override_draws():
    p = generate_subject(3, heart_rate_bpm=60.0, ppg_delay_s=0.2)
    assert (p.heart_rate_bpm, p.ppg_delay_s) == (60.0, 0.2)
    assert p.amplitudes == generate_subject(3).amplitudes


@pytest.mark.parametrize("field,value", [("heart_rate_bpm", 120.0), ("ppg_delay_s", 0.5),
                                         ("noise_std", -0.1), ("widths", (0.02, 0.0, 0.05))])
def test_out_of_range_profile_rejected(field, value):
    with pytest.raises(DegenerateProfileError):
        generate_subject(0, **{field: value})


def test_synthesis_rejects_zero_width_even_when_profile_built_around_checks():
    p = generate_subject(0)
    object.__setattr__(p, "widths", (0.02, -0.01, 0.05))
    with pytest.raises(DegenerateProfileError):
        synthesize_pair(p, 0)


# -- synthesis --------------------------------------------------------------

def test_sixty_bpm_gives_ten_qrs_peaks():
    for seed in range(20):
        pair = synthesize_pair(quiet(seed, heart_rate_bpm=60.0), 0)
        assert abs(len(r_peaks(pair.ecg.samples)) - 10) <= 1


def test_noise_free_synthesis_is_bit_identical():
    p = quiet(5)
    a, b = synthesize_pair(p, 2), synthesize_pair(p, 2)
    assert a.ecg.samples.tobytes() == b.ecg.samples.tobytes()
    assert a.ppg.samples.tobytes() == b.ppg.samples.tobytes()


def test_pair_metadata_and_zscore_invariant():
    pair = synthesize_pair(generate_subject(9), 4, subject_id=77)
    for seg, modality in ((pair.ecg, "ECG"), (pair.ppg, "PPG")):
        assert (seg.modality, seg.subject_id, seg.segment_index) == (modality, 77, 4)
        assert len(seg.samples) == SEGMENT_LEN
        assert abs(seg.samples.mean()) <= 1e-6 and abs(seg.samples.std() - 1) <= 1e-6


def test_pulse_foot_lags_r_peak_by_the_profile_delay():
    for seed in range(30):
        p = quiet(seed)
        pair = synthesize_pair(p, 1)
        peaks = r_peaks(pair.ecg.samples)
        feet = find_peaks(-pair.ppg.samples, distance=40)[0]
        lags = []
        for f in feet:
            before = peaks[peaks < f]
            if before.size and f - before[-1] < 0.5 * SAMPLE_RATE:
                lags.append(f - before[-1])
        assert lags
        assert abs(np.median(lags) - p.ppg_delay_s * SAMPLE_RATE) <= 2, seed


def test_ecg_and_ppg_share_the_beat_rate():
    bin_hz = SAMPLE_RATE / SEGMENT_LEN
    for seed in range(200):
        p = generate_subject(seed)
        pair = synthesize_pair(p, seed % 4)
        fe, fp = autocorr_rate(pair.ecg.samples), autocorr_rate(pair.ppg.samples)
        assert abs(fe - fp) <= bin_hz
        assert abs(fe - p.heart_rate_bpm / 60) <= bin_hz


def test_segment_length_must_span_ten_seconds():
    with pytest.raises(ValueError):
        synthesize_pair(generate_subject(0), 0, L=2048, fs=100.0)


# -- preprocessing ----------------------------------------------------------

def test_zscore_examples():
    np.testing.assert_allclose(zscore([1, 2, 3]), [-1.2247, 0, 1.2247], atol=1e-4)
    x = zscore(np.random.default_rng(0).normal(size=50))
    np.testing.assert_allclose(zscore(x), x, atol=1e-9)
    with pytest.raises(DegenerateSignalError):
        zscore([5, 5, 5])
    with pytest.raises(DegenerateSignalError):
        zscore([1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_zscore_property(xs):
    x = np.array(xs)
    if x.std() < 1e-6:
        return
    z = zscore(x)
    assert abs(z.mean()) <= 1e-6 and abs(z.std() - 1) <= 1e-6


def test_resample_examples():
    np.testing.assert_allclose(resample([0, 1], 3), [0, 0.5, 1])
    x = np.random.default_rng(1).normal(size=17)
    assert np.array_equal(resample(x, 17), x)
    # linear interpolation loses O(h^2 x'') per pass, so "band-limited" means slow here
    t = np.arange(2048) / 2048
    smooth = np.sin(np.pi * t) + 0.3 * t
    np.testing.assert_allclose(resample(resample(smooth, 4096), 2048), smooth, atol=1e-6)
    # 2n-1 points put every original sample back on the grid
    assert np.allclose(resample(resample(x, 33), 17), x, rtol=0, atol=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.integers(2, 60))
def test_resample_keeps_endpoints(xs, n):
    out = resample(xs, n)
    assert len(out) == n and out[0] == xs[0] and out[-1] == xs[-1]


# -- splits -----------------------------------------------------------------

def _tiny(n, pairs=2):
    return make_dataset(n, pairs, seed=0, L=256, fs=25.6)


def test_split_counts_and_determinism():
    ds = split_by_subject(_tiny(10), seed=3)
    names = list(ds.split.values())
    assert [names.count(s) for s in ("train", "valid", "test")] == [8, 1, 1]
    assert split_by_subject(_tiny(10), seed=3).split == ds.split


def test_split_never_leaks_subjects():
    ds = _tiny(12, pairs=3)
    for seed in range(100):
        s = split_by_subject(ds, seed=seed)
        sets = [set(s.subject_ids[s.rows(name)].tolist()) for name in ("train", "valid", "test")]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert sum(len(s.rows(n)) for n in ("train", "valid", "test")) == len(ds)


def test_too_few_subjects():
    with pytest.raises(TooFewSubjectsError):
        split_by_subject(_tiny(1))
    with pytest.raises(ValueError):
        split_by_subject(_tiny(10), fractions=(0.5, 0.2, 0.2))


# -- file format ------------------------------------------------------------

def test_dataset_round_trip_is_bitwise(tmp_path):
    ds = _tiny(4, pairs=3)
    save_dataset(ds, tmp_path / "d.m2ae")
    back = load_dataset(tmp_path / "d.m2ae")
    for name in ("subject_ids", "segment_indices", "ecg", "ppg"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()


def test_stored_segments_keep_zscore_invariant(tmp_path):
    save_dataset(_tiny(3), tmp_path / "d.m2ae")
    back = load_dataset(tmp_path / "d.m2ae")
    for arr in (back.ecg, back.ppg):
        x = arr.astype(np.float64)
        assert np.abs(x.mean(axis=1)).max() <= 1e-6
        assert np.abs(x.std(axis=1) - 1).max() <= 1e-6


def test_empty_dataset_round_trip(tmp_path):
    empty = Dataset.from_pairs([])
    save_dataset(empty, tmp_path / "e.m2ae")
    assert len(load_dataset(tmp_path / "e.m2ae")) == 0


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "header"])
def test_corrupt_files_rejected(tmp_path, damage):
    path = tmp_path / "d.m2ae"
    save_dataset(_tiny(2), path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0] ^= 0xFF
    elif damage == "version":
        raw[4] = 9
    elif damage == "truncate":
        raw = raw[:-5]
    else:
        raw = raw[:6]
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_dataset(path)


def test_subset_and_segment_lookup():
    ds = split_by_subject(_tiny(10, pairs=3), seed=0)
    sid = ds.subjects()[4]
    rows = ds.segments_of(sid)
    assert len(rows) == 3 and set(ds.segment_indices[rows].tolist()) == {0, 1, 2}
    sub = ds.subset(rows)
    assert len(sub) == 3 and set(sub.split) == {sid}
    assert dataclasses.asdict(ds.pair(rows[0]).ecg)["subject_id"] == sid
