"""Desk-scale training objectives over a toy meta-action token policy.

The policy is an order-1 categorical table: context = the previous token
(plus a start context for position 0), one logits row per context. The
canonical vocabulary is the 20 meta-action tokens plus a terminator, but the
losses work for any vocabulary size. Three losses carry exact analytic
gradients: plain MLE, the reward-weighted variant over masked plan
positions, and their weighted combination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from dualdrive.core import N_META_ACTIONS, MetaAction

META_VOCAB = N_META_ACTIONS + 1     # 20 action tokens + terminator
END_TOKEN = N_META_ACTIONS          # terminator id in the canonical vocabulary


class UnknownTokenError(ValueError):
    """Sequence contains a token id outside the vocabulary."""


@dataclass(frozen=True)
class TokenPolicy:
    """Logits table (vocab+1 contexts x vocab); probabilities via row softmax.

    Context i < vocab means "previous token was i"; the extra last row is the
    start context for position 0. The terminator is the last token id.
    """

    logits: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.logits, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1] + 1 or t.shape[1] < 2:
            raise ValueError(f"logits must have shape (vocab+1, vocab), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("logits must be finite")
        object.__setattr__(self, "logits", t)

    @property
    def vocab(self) -> int:
        return self.logits.shape[1]

    @property
    def end_token(self) -> int:
        return self.vocab - 1

    @property
    def start_context(self) -> int:
        return self.vocab

    @classmethod
    def uniform(cls, vocab: int = META_VOCAB) -> "TokenPolicy":
        return cls(np.zeros((vocab + 1, vocab)))

    @classmethod
    def seeded(cls, seed: int = 0, vocab: int = META_VOCAB, scale: float = 0.5) -> "TokenPolicy":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (vocab + 1, vocab)))

    def row_probs(self, context: int) -> np.ndarray:
        row = self.logits[context]
        row = row - row.max()
        e = np.exp(row)
        return e / e.sum()


@dataclass(frozen=True)
class LossWeights:
    lambda_mle: float = 1.0
    lambda_rvlm: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda_mle < 0.0 or self.lambda_rvlm < 0.0:
            raise ValueError("loss weights must be >= 0")


def encode_plan(plan: Iterable[MetaAction], terminate: bool = True) -> Tuple[int, ...]:
    """Meta-action plan -> token id sequence in the canonical vocabulary."""
    ids = [a.index() for a in plan]
    if terminate:
        ids.append(END_TOKEN)
    return tuple(ids)


def _contexts(policy: TokenPolicy, sequence: Sequence[int]) -> List[int]:
    return [policy.start_context] + [int(t) for t in sequence[:-1]]


def _validate(policy: TokenPolicy, sequence: Sequence[int]) -> None:
    if len(sequence) == 0:
        raise ValueError("sequence must be non-empty")
    for tok in sequence:
        if not 0 <= int(tok) < policy.vocab:
            raise UnknownTokenError(f"token {tok} outside vocabulary [0, {policy.vocab})")


def _nll_and_grad(
    policy: TokenPolicy, sequence: Sequence[int], mask: Sequence[bool]
) -> Tuple[float, np.ndarray]:
    """Masked token NLL and its gradient w.r.t. the logits table."""
    loss = 0.0
    grad = np.zeros_like(policy.logits)
    for ctx, tok, keep in zip(_contexts(policy, sequence), sequence, mask):
        if not keep:
            continue
        probs = policy.row_probs(ctx)
        loss -= float(np.log(probs[tok]))
        grad[ctx] += probs
        grad[ctx, tok] -= 1.0
    return loss, grad


def mle_loss(policy: TokenPolicy, sequence: Sequence[int]) -> Tuple[float, np.ndarray]:
    """-sum log p(token | context) over every position."""
    _validate(policy, sequence)
    return _nll_and_grad(policy, sequence, [True] * len(sequence))


def rvlm_loss(
    policy: TokenPolicy, sequence: Sequence[int], reward: float
) -> Tuple[float, np.ndarray]:
    """Reward-weighted NLL over plan tokens only (the terminator is masked out).

    Exactly reward * (the MLE loss restricted to masked positions), so the
    gradient is reward times the restricted MLE gradient. Linear in reward.
    """
    _validate(policy, sequence)
    mask = [int(tok) != policy.end_token for tok in sequence]
    loss, grad = _nll_and_grad(policy, sequence, mask)
    return reward * loss, reward * grad


def slow_loss(
    policy: TokenPolicy,
    batch: Sequence[Tuple[Sequence[int], float]],
    weights: LossWeights = LossWeights(),
) -> Tuple[float, np.ndarray]:
    """lambda_mle * mean(mle) + lambda_rvlm * mean(rvlm) over the batch."""
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    grad = np.zeros_like(policy.logits)
    n = len(batch)
    for sequence, reward in batch:
        ml, gl = mle_loss(policy, sequence)
        rl, gr = rvlm_loss(policy, sequence, reward)
        total += (weights.lambda_mle * ml + weights.lambda_rvlm * rl) / n
        grad += (weights.lambda_mle * gl + weights.lambda_rvlm * gr) / n
    return total, grad


def gradient_descent(
    policy: TokenPolicy,
    batch: Sequence[Tuple[Sequence[int], float]],
    weights: LossWeights = LossWeights(),
    steps: int = 50,
    lr: float = 0.1,
) -> Tuple[TokenPolicy, List[float]]:
    """Plain GD on the logits table; returns the final policy and loss trace."""
    losses = []
    for _ in range(steps):
        loss, grad = slow_loss(policy, batch, weights)
        losses.append(loss)
        policy = TokenPolicy(policy.logits - lr * grad)
    losses.append(slow_loss(policy, batch, weights)[0])
    return policy, losses


def policy_action_embeddings(policy: TokenPolicy, d_a: int = 16) -> np.ndarray:
    """Distill the canonical policy into a (20, d_a) embedding table.

    Row for action token t = the first d_a vocabulary columns of t's context
    row, L2-normalized (a co-occurrence signature of what tends to follow t).
    """
    if policy.vocab != META_VOCAB:
        raise ValueError("embedding export needs the canonical meta-action vocabulary")
    if d_a > policy.vocab:
        raise ValueError(f"d_a must be <= {policy.vocab}")
    rows = policy.logits[:N_META_ACTIONS, :d_a].copy()
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return rows / norms


def export_embeddings(policy: TokenPolicy, path: str, projection_seed: int = 0) -> None:
    """Write the distilled table in the fusion weight-file format."""
    from dualdrive import fusion

    emb = fusion.ActionEmbeddings(policy_action_embeddings(policy, fusion.D_A))
    proj = fusion.ProjectionSet.seeded(projection_seed)
    fusion.save_weights(path, emb, proj)
