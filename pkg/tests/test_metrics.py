import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avsd.metrics import (
    REPORT_COLUMNS,
    UttScore,
    bootstrap_ci,
    cer,
    edit_distance,
    score_utterance,
    speaker_report,
    write_report,
)

from oracles import edit_distance_dp


def test_one_substitution_in_three():
    s = score_utterance("u", "abc", "abd")
    assert (s.S, s.I, s.D, s.N) == (1, 0, 0, 3)
    assert cer([s]) == pytest.approx(100 / 3, abs=5e-3)


def test_cer_can_exceed_100():
    s = score_utterance("u", "ab", "xyzw")
    assert cer([s]) == pytest.approx(200.0)


def test_empty_reference_total_rejected():
    with pytest.raises(ValueError):
        cer([score_utterance("u", "", "abc")])


def test_identical_strings_have_no_errors():
    assert edit_distance("hello", "hello") == (0, 0, 0)


def test_pure_insertions_and_deletions():
    assert edit_distance("", "abc") == (0, 3, 0)
    assert edit_distance("abc", "") == (0, 0, 3)


def test_matches_dp_oracle_on_1000_pairs():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        ref = rng.integers(0, 4, size=rng.integers(0, 12)).tolist()
        hyp = rng.integers(0, 4, size=rng.integers(0, 12)).tolist()
        s, i, d = edit_distance(ref, hyp)
        assert s + i + d == edit_distance_dp(ref, hyp)
        # alignment consistency: reference and hypothesis lengths are recovered
        assert len(ref) - d + i == len(hyp)


@given(a=st.text("abc", max_size=8), b=st.text("abc", max_size=8))
def test_edit_distance_symmetric_total(a, b):
    assert sum(edit_distance(a, b)) == sum(edit_distance(b, a))


def _scores(rng, n=30):
    out = []
    for k in range(n):
        ref_len = int(rng.integers(3, 10))
        errs = rng.integers(0, 3, size=3)
        out.append(UttScore(f"u{k}", int(errs[0]), int(errs[1]), int(errs[2]), ref_len, f"s{k % 3}"))
    return out


def test_bootstrap_deterministic_per_seed():
    scores = _scores(np.random.default_rng(0))
    assert bootstrap_ci(scores, B=500, seed=4) == bootstrap_ci(scores, B=500, seed=4)
    assert bootstrap_ci(scores, B=500, seed=4) != bootstrap_ci(scores, B=500, seed=5)


def test_bootstrap_zero_width_for_homogeneous_scores():
    scores = [UttScore(f"u{k}", 1, 0, 0, 4) for k in range(20)]
    low, high = bootstrap_ci(scores, B=300, seed=1)
    assert low == high == pytest.approx(25.0)


def test_bootstrap_brackets_point_estimate():
    scores = _scores(np.random.default_rng(2), n=60)
    low, high = bootstrap_ci(scores, B=2000)
    assert low <= cer(scores) <= high


def test_bootstrap_rejects_bad_arguments():
    with pytest.raises(ValueError):
        bootstrap_ci([], B=10)
    with pytest.raises(ValueError):
        bootstrap_ci(_scores(np.random.default_rng(0)), B=0)


def test_speaker_report_rows_and_csv(tmp_path):
    scores = _scores(np.random.default_rng(3))
    rows = speaker_report(scores, B=200)
    assert [r["speaker_id"] for r in rows] == ["s0", "s1", "s2", "ALL"]
    assert rows[-1]["N"] == sum(r["N"] for r in rows[:-1])
    assert rows[-1]["CER"] == pytest.approx(cer(scores))
    path = tmp_path / "report.csv"
    write_report(rows, path)
    with open(path) as f:
        back = list(csv.DictReader(f))
    assert list(back[0]) == REPORT_COLUMNS
    assert len(back) == 4
