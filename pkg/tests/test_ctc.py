import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from avsd.ctc import CTCPrefixScorer, ctc_loss, ctc_loss_batch, ctc_prefix_score, is_feasible, min_frames
from avsd.tensor import finite_difference, relative_error

from oracles import ctc_brute_force, prefix_prob_brute_force


def _log(p):
    return torch.log(torch.as_tensor(p, dtype=torch.float64))


def _random_posteriors(rng, t, c, sharp=1.0):
    logits = rng.normal(0, sharp, size=(t, c))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def test_single_frame_single_label():
    probs = np.array([[0.7, 0.3]])  # label 0, blank 1
    assert float(ctc_loss(_log(probs), [0], blank=1)) == pytest.approx(-math.log(0.7), abs=1e-12)


def test_two_uniform_frames():
    probs = np.full((2, 3), 1 / 3)
    assert float(ctc_loss(_log(probs), [0], blank=2)) == pytest.approx(math.log(3), abs=1e-12)


def test_infeasible_is_infinite():
    probs = np.full((1, 3), 1 / 3)
    assert math.isinf(float(ctc_loss(_log(probs), [0, 1], blank=2)))
    assert not is_feasible(1, [0, 1])


def test_min_frames_counts_repeats():
    assert min_frames([0, 0, 1]) == 4
    assert min_frames([0, 1, 2]) == 3
    assert min_frames([]) == 0


def test_unnormalized_rows_rejected():
    with pytest.raises(ValueError, match="normalized"):
        ctc_loss(torch.zeros(3, 4, dtype=torch.float64), [0], blank=3)


def test_matches_brute_force_on_100_draws():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 7))
        c = int(rng.integers(2, 5))
        n = int(rng.integers(1, 4))
        blank = c - 1
        target = [int(x) for x in rng.integers(0, c - 1, size=n)]
        probs = _random_posteriors(rng, t, c, sharp=1.5)
        ours = float(ctc_loss(_log(probs), target, blank))
        ref = ctc_brute_force(probs, target, blank)
        if math.isinf(ref):
            assert math.isinf(ours)
        else:
            worst = max(worst, abs(ours - ref))
    assert worst < 1e-6


def test_batch_matches_single_with_padding():
    rng = np.random.default_rng(3)
    lens = [5, 3, 6]
    targets = [[0, 1], [2], [1, 1, 0]]
    lp = torch.full((3, 6, 4), math.log(0.25), dtype=torch.float64)
    for i, t in enumerate(lens):
        lp[i, :t] = _log(_random_posteriors(rng, t, 4))
    batch = ctc_loss_batch(lp, lens, targets, blank=3)
    for i, t in enumerate(lens):
        single = ctc_loss(lp[i, :t], targets[i], blank=3)
        assert float(batch[i]) == pytest.approx(float(single), abs=1e-10)


def test_invariant_to_permuting_unused_columns():
    rng = np.random.default_rng(9)
    probs = _random_posteriors(rng, 5, 6)
    target = [0, 2]
    swapped = probs.copy()
    swapped[:, [1, 3, 4]] = probs[:, [4, 1, 3]]
    a = float(ctc_loss(_log(probs), target, blank=5))
    b = float(ctc_loss(_log(swapped), target, blank=5))
    assert a == pytest.approx(b, abs=1e-12)


def test_gradient_wrt_logits_matches_finite_differences():
    rng = np.random.default_rng(17)
    logits0 = rng.normal(size=(6, 4))
    target = [1, 1, 0]

    def loss(logits):
        return ctc_loss(torch.log_softmax(torch.as_tensor(logits), dim=-1), target, blank=3)

    x = torch.tensor(logits0, requires_grad=True)
    loss(x).backward()
    num = finite_difference(lambda v: float(loss(v)), logits0)
    assert relative_error(x.grad.numpy(), num) < 1e-4


# -- prefix scoring --------------------------------------------------------


def test_prefix_prob_one_on_exact_path():
    # frames: a, blank, b with certainty
    probs = np.full((3, 3), 1e-300)
    probs[0, 0] = probs[1, 2] = probs[2, 1] = 1.0
    scorer = CTCPrefixScorer(np.log(probs), blank=2)
    state = scorer.initial_state()
    _, state = ctc_prefix_score(state, 0, np.log(probs), 2)
    _, state = ctc_prefix_score(state, 1, np.log(probs), 2)
    assert math.exp(state.log_psi) == pytest.approx(1.0)
    assert math.exp(scorer.full(state)) == pytest.approx(1.0)


def test_complete_string_prob_two_uniform_frames():
    lp = np.log(np.full((2, 3), 1 / 3))
    scorer = CTCPrefixScorer(lp, blank=2)
    _, st_a = ctc_prefix_score(scorer.initial_state(), 0, lp, 2)
    assert math.exp(scorer.full(st_a)) == pytest.approx(1 / 3)


def test_empty_prefix_complete_prob_is_all_blank():
    rng = np.random.default_rng(4)
    probs = _random_posteriors(rng, 4, 3)
    scorer = CTCPrefixScorer(np.log(probs), blank=2)
    assert math.exp(scorer.full(scorer.initial_state())) == pytest.approx(np.prod(probs[:, 2]))


def test_eos_delta_uses_complete_probability():
    lp = np.log(np.full((2, 3), 1 / 3))
    scorer = CTCPrefixScorer(lp, blank=2)
    _, st_a = ctc_prefix_score(scorer.initial_state(), 0, lp, 2)
    delta, same = ctc_prefix_score(st_a, 3, lp, 2, eos=3)
    assert same is st_a
    assert delta == pytest.approx(scorer.full(st_a) - st_a.log_psi)


@given(seed=st.integers(0, 10_000), t=st.integers(1, 5), c=st.integers(2, 4), n=st.integers(0, 3))
def test_prefix_probabilities_match_enumeration(seed, t, c, n):
    rng = np.random.default_rng(seed)
    blank = c - 1
    probs = _random_posteriors(rng, t, c)
    prefix = [int(x) for x in rng.integers(0, c - 1, size=n)]
    state = CTCPrefixScorer(np.log(probs), blank).initial_state()
    for tok in prefix:
        _, state = ctc_prefix_score(state, tok, np.log(probs), blank)
    expect = prefix_prob_brute_force(probs, prefix, blank)
    got = math.exp(state.log_psi) if np.isfinite(state.log_psi) else 0.0
    assert got == pytest.approx(expect, abs=1e-12, rel=1e-9)


@given(seed=st.integers(0, 10_000), t=st.integers(1, 6), n=st.integers(0, 3))
def test_next_token_distribution_sums_to_one(seed, t, n):
    rng = np.random.default_rng(seed)
    probs = _random_posteriors(rng, t, 4)
    scorer = CTCPrefixScorer(np.log(probs), blank=3)
    state = scorer.initial_state()
    for tok in rng.integers(0, 3, size=n):
        _, state = ctc_prefix_score(state, int(tok), np.log(probs), 3)
    dist, *_ = scorer.next_token_probs(state, 3)
    if np.isfinite(state.log_psi):
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)
    else:
        assert dist.sum() == 0.0
