import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sense.dataset import (
    ZEROSHOT_CLASSES,
    StereoSample,
    _as_loaded,
    load_manifest,
    load_zeroshot_manifest,
    make_batch,
    read_labels,
    read_mask,
    synth_corpus,
    synth_zeroshot,
)
from sense.errors import ConfigError, FormatError, MissingFileError


def _write(path, recs):
    path.write_text("\n".join(json.dumps(r) if isinstance(r, dict) else r for r in recs) + "\n")
    return path


def _rec(i, **kw):
    return {"id": f"s{i}", "left_path": "l.png", "right_path": "r.png", "phrase": "red circle",
            "mask_path": "m.png", **kw}


def test_manifest_two_lines(tmp_path):
    samples = load_manifest(_write(tmp_path / "m.jsonl", [_rec(0), _rec(1, disparity_path="d.pfm")]))
    assert [s.id for s in samples] == ["s0", "s1"]
    assert samples[0].left_path == str(tmp_path / "l.png")
    assert samples[1].disparity_path == str(tmp_path / "d.pfm")


def test_manifest_duplicate_id(tmp_path):
    with pytest.raises(FormatError, match="s0"):
        load_manifest(_write(tmp_path / "m.jsonl", [_rec(0), _rec(0)]))


def test_manifest_missing_phrase(tmp_path):
    rec = _rec(0)
    del rec["phrase"]
    with pytest.raises(FormatError, match="phrase"):
        load_manifest(_write(tmp_path / "m.jsonl", [rec]))


def test_manifest_bad_line_number_and_empty_phrase(tmp_path):
    with pytest.raises(FormatError, match=":2:"):
        load_manifest(_write(tmp_path / "m.jsonl", [_rec(0), "{not json"]))
    with pytest.raises(FormatError):
        load_manifest(_write(tmp_path / "e.jsonl", [_rec(0, phrase="  ")]))
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "absent.jsonl")


def _toy_samples(n=5, h=8, w=8):
    out = []
    for i in range(n):
        img = np.full((h, w, 3), i * 10, np.uint8)
        mask = np.zeros((h, w), bool)
        mask[i % h, :] = True
        out.append(StereoSample(f"t{i}", img, img, mask, f"phrase {i}", np.zeros((h, w), np.float32)))
    return out


@pytest.mark.parametrize("frac, batch, expected", [(0.0, 8, 0), (0.2, 64, 13), (1.0, 8, 8), (0.2, 8, 2)])
def test_negative_counts(frac, batch, expected):
    # 0.2 * 64 = 12.8 rounds to 13; 0.2 * 8 = 1.6 rounds to 2
    assert round(frac * batch) == expected
    b = make_batch(_toy_samples(), batch, frac, rng_seed=0)
    assert int(b.negative_flags.sum()) == expected
    assert int((b.targets.reshape(batch, -1).sum(1) == 0).sum()) == expected


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0, 1), batch=st.integers(1, 20))
def test_negative_sample_law_property(seed, frac, batch):
    samples = _toy_samples()
    b = make_batch(samples, batch, frac, rng_seed=seed)
    by_id = {s.id: s for s in samples}
    assert len(b.pairs) == len(b.phrases) == len(b.targets) == len(b.disparities) == len(b.negative_flags) == batch
    for flag, sid, phrase, target in zip(b.negative_flags, b.source_ids, b.phrases, b.targets):
        if flag:
            assert not target.any()
            assert phrase != by_id[sid].phrase
        else:
            assert phrase == by_id[sid].phrase
    again = make_batch(samples, batch, frac, rng_seed=seed)
    assert again.phrases == b.phrases and np.array_equal(again.targets, b.targets)
    assert again.source_ids == b.source_ids


def test_negatives_need_two_phrases():
    samples = _toy_samples(2)
    samples[1].phrase = samples[0].phrase
    with pytest.raises(ConfigError):
        make_batch(samples, 4, 0.5, 0)
    with pytest.raises(ConfigError):
        make_batch(_toy_samples(), 4, 1.5, 0)


def test_shared_crop_window():
    s = _toy_samples(1, 16, 20)[0]
    s.disparity = np.arange(320, dtype=np.float32).reshape(16, 20)
    s.left = np.broadcast_to(s.disparity[..., None], (16, 20, 3)).astype(np.uint8)
    b = make_batch([s], 3, 0.0, rng_seed=4, resolution=8)
    for pair, d, (y, x), t in zip(b.pairs, b.disparities, b.windows, b.targets):
        assert np.array_equal(d, s.disparity[y:y + 8, x:x + 8])
        assert np.array_equal(pair.left, s.left[y:y + 8, x:x + 8])
        assert np.array_equal(t, s.mask[y:y + 8, x:x + 8])


def test_synth_corpus_deterministic_bytes(tmp_path):
    synth_corpus(3, 64, 9, tmp_path / "a")
    synth_corpus(3, 64, 9, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_corpus_contract(tmp_path):
    samples = synth_corpus(6, 64, 1, tmp_path)
    assert load_manifest(tmp_path / "manifest.jsonl")[0].phrase == samples[0].phrase
    for s in _as_loaded(samples):
        assert s.mask.any() and s.mask.shape == (64, 64)
        assert s.phrase.strip()
        assert s.disparity is not None and s.disparity.min() >= 0
        # right view is the left view displaced by positive disparity
        assert not np.array_equal(s.left, s.right)


def test_synth_zeroshot(tmp_path):
    samples, classes = synth_zeroshot(2, 64, 0, tmp_path)
    assert classes == list(ZEROSHOT_CLASSES)
    assert (tmp_path / "classes.txt").read_text().split() == classes
    labels = read_labels(samples[0].label_path)
    assert labels.shape == (64, 64) and labels.max() < len(classes) and (labels == 0).any()
    assert len(load_zeroshot_manifest(tmp_path / "zeroshot.jsonl")) == 2


def test_missing_raster_files(tmp_path):
    with pytest.raises(MissingFileError):
        read_mask(tmp_path / "no.png")
    with pytest.raises(MissingFileError):
        read_labels(tmp_path / "no.png")


def test_sample_shape_validation():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(FormatError):
        StereoSample("x", img, np.zeros((4, 5, 3), np.uint8), np.zeros((4, 4), bool), "p")
    with pytest.raises(FormatError):
        StereoSample("x", img, img, np.zeros((3, 4), bool), "p")
