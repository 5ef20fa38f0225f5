"""CTC loss (log-space forward recursion) and incremental CTC prefix scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# finite stand-in for log(0) so logsumexp keeps finite gradients
NEG = -1e30


def min_frames(target) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a
    separating blank between each pair of equal neighbours."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(num_frames: int, target) -> bool:
    return num_frames >= min_frames(target)


def _check_normalized(log_probs: torch.Tensor, tol: float = 1e-6) -> None:
    total = torch.logsumexp(log_probs.detach(), dim=-1)
    if torch.any(torch.abs(total) > tol):
        raise ValueError("CTC posteriors must be normalized per frame (log-probabilities summing to 1)")


def ctc_loss_batch(log_probs: torch.Tensor, lengths, targets, blank: int) -> torch.Tensor:
    """Negative log-likelihood per utterance, ``+inf`` where no alignment exists.

    ``log_probs`` is ``(B, T, C)`` of per-frame log posteriors over labels
    plus blank; ``lengths`` gives the valid frames of each row.
    """
    b, t_max, _ = log_probs.shape
    lengths = [int(x) for x in lengths]
    s_max = 2 * max((len(tg) for tg in targets), default=0) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    skip = torch.zeros((b, s_max), dtype=torch.bool)
    for i, tg in enumerate(targets):
        for j, lab in enumerate(tg):
            s = 2 * j + 1
            ext[i, s] = int(lab)
            if j > 0 and int(tg[j - 1]) != int(lab):
                skip[i, s] = True
    state_valid = torch.arange(s_max)[None, :] < torch.tensor([2 * len(tg) + 1 for tg in targets])[:, None]

    emit = torch.gather(log_probs, 2, ext[:, None, :].expand(b, t_max, s_max))
    neg = torch.full((b, s_max), NEG, dtype=log_probs.dtype)
    alpha = neg.clone()
    alpha[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 1] = emit[:, 0, 1]
    alpha = torch.where(state_valid, alpha, neg)
    finals: list[torch.Tensor | None] = [None] * b
    for i in range(b):
        if lengths[i] == 1:
            finals[i] = alpha[i]
    for t in range(1, t_max):
        prev1 = torch.cat([neg[:, :1], alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg[:, :2], alpha[:, :-2]], dim=1)
        prev2 = torch.where(skip, prev2, neg)
        alpha = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        alpha = torch.where(state_valid, alpha, neg)
        for i in range(b):
            if lengths[i] == t + 1:
                finals[i] = alpha[i]
    losses = []
    for i, tg in enumerate(targets):
        if lengths[i] < 1:
            raise ValueError("utterance with no frames")
        if not is_feasible(lengths[i], tg):
            losses.append(torch.tensor(float("inf"), dtype=log_probs.dtype))
            continue
        last = 2 * len(tg)
        ends = finals[i][last : last + 1] if last == 0 else finals[i][last - 1 : last + 1]
        losses.append(-torch.logsumexp(ends, dim=0))
    return torch.stack(losses)


def ctc_loss(log_probs: torch.Tensor, target, blank: int) -> torch.Tensor:
    """CTC loss of a single ``(T, C)`` log-posterior matrix; ``+inf`` if infeasible."""
    _check_normalized(log_probs)
    return ctc_loss_batch(log_probs.unsqueeze(0), [log_probs.shape[0]], [list(target)], blank)[0]


# -- prefix scoring -----------------------------------------------------------


@dataclass
class CTCState:
    """Forward variables of one prefix: log prob of the prefix ending at frame
    ``t`` in a non-blank (``r_n``) or blank (``r_b``) symbol."""

    r_n: np.ndarray
    r_b: np.ndarray
    last: int | None
    log_psi: float


class CTCPrefixScorer:
    def __init__(self, log_probs: np.ndarray, blank: int):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank
        self.T = self.x.shape[0]

    def initial_state(self) -> CTCState:
        return CTCState(
            r_n=np.full(self.T, -np.inf),
            r_b=np.cumsum(self.x[:, self.blank]),
            last=None,
            log_psi=0.0,
        )

    def full(self, state: CTCState) -> float:
        """Log probability that the input collapses to exactly this prefix."""
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))

    def extend(self, state: CTCState, tokens) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Prefix log-probabilities of ``prefix + c`` for every ``c`` in
        ``tokens`` plus the new forward variables, shaped ``(T, K)``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        x_c = self.x[:, tokens]
        k = tokens.size
        r_n = np.full((self.T, k), -np.inf)
        r_b = np.full((self.T, k), -np.inf)
        if state.last is None:
            r_n[0] = x_c[0]
        same = tokens == state.last if state.last is not None else np.zeros(k, dtype=bool)
        phi = np.where(same[None, :], state.r_b[:, None], np.logaddexp(state.r_b, state.r_n)[:, None])
        log_psi = r_n[0].copy()
        with np.errstate(invalid="ignore"):
            for t in range(1, self.T):
                r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + x_c[t]
                r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + self.x[t, self.blank]
                log_psi = np.logaddexp(log_psi, phi[t - 1] + x_c[t])
        return log_psi, r_n, r_b

    def next_token_probs(self, state: CTCState, num_labels: int):
        """Distribution over ``labels + [EOS]`` implied by the prefix scores.

        ``P(c | g) = psi(g c) / psi(g)`` and ``P(EOS | g) = p(g) / psi(g)``;
        these sum to one. Also returns ``log psi(g c)`` and the forward
        variables for each label extension.
        """
        labels = np.arange(num_labels)
        log_psi, r_n, r_b = self.extend(state, labels)
        if not np.isfinite(state.log_psi):
            return np.zeros(num_labels + 1), log_psi, r_n, r_b
        logs = np.append(log_psi, self.full(state)) - state.log_psi
        return np.exp(logs), log_psi, r_n, r_b


def ctc_prefix_score(state: CTCState, next_token: int, log_probs: np.ndarray, blank: int, eos: int | None = None):
    """Incremental log-score of appending ``next_token`` to the prefix.

    Returns ``(log psi(g c) - log psi(g), new_state)``. For ``next_token ==
    eos`` the delta uses the complete-string probability and the state is
    returned unchanged.
    """
    scorer = CTCPrefixScorer(log_probs, blank)
    if eos is not None and next_token == eos:
        return scorer.full(state) - state.log_psi, state
    log_psi, r_n, r_b = scorer.extend(state, [next_token])
    new = CTCState(r_n[:, 0], r_b[:, 0], int(next_token), float(log_psi[0]))
    return new.log_psi - state.log_psi, new
