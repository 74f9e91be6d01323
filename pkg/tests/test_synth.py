import filecmp

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from micfer.codec import decode_all
from micfer.evaluate import linear_probe
from micfer.synth import (ExpressionStyle, ExpressionTemplate, ManifestEntry, apex_index,
                          generate_dataset, intensity, load_gop, load_manifest, read_manifest,
                          render_frame, render_sequence, subject, write_manifest)


def test_first_frame_is_base_image_up_to_noise():
    subj = subject(4)
    sample = render_sequence(subj, ExpressionTemplate(3), noise_seed=5)
    diff = sample.frames[0].astype(int) - subj.base_image().astype(int)
    assert np.abs(diff).max() <= 2


def test_ramp_apex_is_last_and_peak_apex_is_middle():
    assert apex_index("ramp", 16) == 15
    assert apex_index("peak", 16) == 8
    assert intensity("ramp", 15, 16) == 1.0
    assert intensity("peak", 0, 9) == 0.0 and intensity("peak", 4, 9) == 1.0


def test_unknown_profile_and_short_sequences_rejected():
    with pytest.raises(ValueError):
        render_sequence(subject(0), ExpressionTemplate(0), profile="wave")
    with pytest.raises(ValueError):
        render_sequence(subject(0), ExpressionTemplate(0), length=1)


def test_subjects_differ_more_than_expressions():
    tmpl = ExpressionTemplate(1)
    a = render_sequence(subject(0), tmpl, noise_seed=1).frames.astype(float)
    b = render_sequence(subject(1), tmpl, noise_seed=1).frames.astype(float)
    assert np.abs(a - b).mean() > 10


def test_classes_move_different_regions():
    subj = subject(2)
    apexes = [render_sequence(subj, ExpressionTemplate(k), noise=0).frames[-1].astype(float)
              for k in range(7)]
    base = subj.base_image().astype(float)
    centroids = []
    for img in apexes:
        d = np.abs(img - base)[..., 0]
        ys, xs = np.nonzero(d > 1)
        centroids.append((ys.mean(), xs.mean()))
    spread = np.linalg.norm(np.array(centroids) - np.mean(centroids, axis=0), axis=1)
    assert spread.min() > 3


@given(st.integers(0, 500), st.integers(0, 3))
def test_styles_are_bounded_and_per_identity(ident, seed):
    style = subject(ident, seed, style_spread=1.0).style()
    assert 0.7 <= style.gain <= 1.3 and abs(style.angle) <= 0.3
    assert max(map(abs, style.shift)) <= 2.0
    assert np.exp(-0.7) <= style.tempo <= np.exp(0.7)
    assert subject(ident, seed).style() == ExpressionStyle()


def test_styles_differ_between_identities():
    assert len({subject(i, style_spread=1.0).style() for i in range(20)}) == 20


def test_default_renders_the_shared_template():
    plain = subject(3)
    tmpl = ExpressionTemplate(2)
    frame = render_frame(plain, tmpl, 0.6)
    assert not np.array_equal(frame, render_frame(subject(3, style_spread=1.0), tmpl, 0.6))
    ys, xs = plain._grid()
    styled = tmpl.displacement(ys, xs, 0.6, 32, 32, subject(3, style_spread=1.0).style())
    for a, b in zip(tmpl.displacement(ys, xs, 0.6, 32, 32), styled):
        assert not np.allclose(a, b)


def test_tempo_keeps_neutral_start_and_apex():
    subj = subject(7, style_spread=1.0)
    assert subj.style().tempo != 1.0
    sample = render_sequence(subj, ExpressionTemplate(4), noise=0)
    np.testing.assert_array_equal(sample.frames[-1], render_frame(subj, ExpressionTemplate(4), 1.0))
    np.testing.assert_array_equal(sample.frames[0], render_frame(subj, ExpressionTemplate(4), 0.0))


@given(st.integers(0, 50), st.integers(0, 6), st.sampled_from(["ramp", "peak"]),
       st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_sequences_are_deterministic_and_in_range(ident, cls, profile, length, seed):
    a = render_sequence(subject(ident, height=16, width=16), ExpressionTemplate(cls), profile,
                        length, seed)
    b = render_sequence(subject(ident, height=16, width=16), ExpressionTemplate(cls), profile,
                        length, seed)
    assert a.frames.dtype == np.uint8 and a.frames.shape == (length, 16, 16, 1)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.apex_idx == apex_index(profile, length)


def test_manifest_roundtrip(tmp_path):
    entries = [ManifestEntry("a.rgop", 1, 2, 15, "ramp"), ManifestEntry("b.rgop", 0, 3, 8, "peak")]
    write_manifest(tmp_path / "m.csv", entries)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == \
        "path,expression_label,identity_label,apex_idx,profile"
    assert read_manifest(tmp_path / "m.csv") == entries


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("file,label\nx,1\n")
    with pytest.raises(ValueError, match="header"):
        read_manifest(tmp_path / "m.csv")


def test_missing_manifest_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="train.csv"):
        load_manifest(tmp_path)


def test_missing_gop_file_names_path(tiny_dataset):
    m = load_manifest(tiny_dataset)
    ghost = ManifestEntry("nope.rgop", 0, 0, 5, "ramp")
    with pytest.raises(OSError, match="nope.rgop"):
        load_gop(m.root, ghost)


def test_regeneration_is_bit_identical(tmp_path, tiny_dataset):
    generate_dataset(tmp_path, n_identities=5, n_classes=3, per_cell=2, length=6, size=16)
    names = sorted(p.name for p in tiny_dataset.iterdir())
    assert names == sorted(p.name for p in tmp_path.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tiny_dataset, tmp_path, names, shallow=False)
    assert not mismatch and not errors


def test_gop_files_decode_to_rendered_frames(tiny_dataset):
    m = load_manifest(tiny_dataset)
    e = m.train[0]
    frames = decode_all(load_gop(m.root, e))
    assert frames.shape == (6, 16, 16, 1)
    assert e.apex_idx == 5


def test_default_dataset_counts_and_split(default_dataset):
    m = load_manifest(default_dataset)
    assert len(m.train) == 448 and len(m.test) == 112
    train_ids = {e.identity_label for e in m.train}
    test_ids = {e.identity_label for e in m.test}
    assert not train_ids & test_ids
    assert len(train_ids) == 16 and len(test_ids) == 4
    for split in (m.train, m.test):
        counts = np.bincount([e.expression_label for e in split], minlength=7)
        assert len(set(counts.tolist())) == 1
    all_entries = read_manifest(default_dataset / "manifest.csv")
    assert len(all_entries) == 560


def test_labels_recoverable_from_decoded_frames(default_splits):
    # direct classifier on decoded frames: |apex - neutral| as features
    train, test = default_splits

    def feats(split):
        neutral = split.i_frames.astype(float) / 255.0
        return np.abs(split.apex - neutral).reshape(len(split), -1)

    probe = linear_probe(feats(train), train.labels, feats(test), test.labels, epochs=200)
    assert probe.accuracy >= 0.95
