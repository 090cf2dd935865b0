"""Independent reference computations used by tests and ``tlab verify``.

Nothing here shares code paths with the searches beyond the Scorer protocol:
sequence probabilities come from the forward algorithm on a lattice rebuilt
from scratch, and argmax sequences from plain enumeration.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from tlab.losses import forward_vars
from tlab.scorer import START, log_softmax

LogProbFn = Callable[[int, Tuple[int, ...]], np.ndarray]


class TableScorer:
    """Scorer whose output distribution is an explicit function of (frame, prefix).

    The decoder state and output are simply the label prefix, so any lattice
    can be written down by hand. ``features`` passed to the searches is
    ignored beyond its length.
    """

    def __init__(self, vocab_size: int, num_frames: int, logprob_fn: LogProbFn):
        self.vocab_size = vocab_size
        self.num_frames = num_frames
        self._fn = logprob_fn
        self._cache: Dict[Tuple[int, Tuple[int, ...]], np.ndarray] = {}

    def logprobs(self, t: int, prefix: Tuple[int, ...]) -> np.ndarray:
        key = (t, tuple(prefix))
        if key not in self._cache:
            lp = np.asarray(self._fn(t, tuple(prefix)), dtype=np.float64)
            if lp.shape != (self.vocab_size + 1,):
                raise ValueError("table row has the wrong size")
            self._cache[key] = lp
        return self._cache[key]

    def encode(self, features=None):
        return list(range(self.num_frames))

    def initial_state(self):
        return None

    def batch_decode(self, labels, states):
        out = []
        for label, state in zip(labels, states):
            out.append(() if label == START else state + (int(label),))
        return list(out), list(out)

    def batch_joint(self, enc_t, dec_outs):
        return np.stack([self.logprobs(enc_t, prefix) for prefix in dec_outs])


def random_table(
    vocab_size: int,
    num_frames: int,
    seed: int,
    scale: float = 1.0,
    blank_bias: float = 1.5,
) -> TableScorer:
    """Random but reproducible table: logits ~ N(0, scale^2), blank shifted by ``blank_bias``."""

    def fn(t, prefix):
        rng = np.random.default_rng([seed, t, len(prefix), *prefix])
        logits = rng.normal(0.0, scale, size=vocab_size + 1)
        logits[0] += blank_bias
        return log_softmax(logits)

    return TableScorer(vocab_size, num_frames, fn)


def constant_table(vocab_size: int, num_frames: int, probs: Sequence[float]) -> TableScorer:
    lp = np.log(np.asarray(probs, dtype=np.float64))
    return TableScorer(vocab_size, num_frames, lambda t, prefix: lp)


def sequence_lattice(scorer, features, y: Sequence[int]) -> np.ndarray:
    """T x (U+1) x (V+1) lattice of ``y`` rebuilt through the scorer protocol."""
    enc = scorer.encode(features)
    outs, states = scorer.batch_decode([START], [scorer.initial_state()])
    dec = [outs[0]]
    state = states[0]
    for k in y:
        o, s = scorer.batch_decode([k], [state])
        dec.append(o[0])
        state = s[0]
    return np.stack([scorer.batch_joint(enc_t, dec) for enc_t in enc])


def sequence_logprob(scorer, features, y: Sequence[int]) -> float:
    """log P(y | x) summed over all alignments."""
    _, log_p = forward_vars(sequence_lattice(scorer, features, y), list(y))
    return log_p


def all_sequences(vocab_size: int, max_len: int) -> Iterator[Tuple[int, ...]]:
    for n in range(max_len + 1):
        yield from itertools.product(range(1, vocab_size + 1), repeat=n)


def exhaustive_argmax(
    scorer, features, max_len: int
) -> Tuple[Tuple[int, ...], float, Dict[Tuple[int, ...], float]]:
    """Best label sequence (up to ``max_len`` labels) by marginal probability."""
    scores = {
        y: sequence_logprob(scorer, features, y)
        for y in all_sequences(scorer.vocab_size, max_len)
    }
    best = min(scores, key=lambda y: (-scores[y], len(y), y))
    return best, scores[best], scores


def random_lattice(rng: np.random.Generator, T: int, U: int, V: int, scale: float = 1.0) -> np.ndarray:
    return log_softmax(rng.normal(0.0, scale, size=(T, U + 1, V + 1)))


def random_instance(rng: np.random.Generator, max_T: int = 5, max_U: int = 4, max_V: int = 4):
    """Random normalized lattice with a random target: (lattice, y)."""
    T = int(rng.integers(1, max_T + 1))
    U = int(rng.integers(0, max_U + 1))
    V = int(rng.integers(1, max_V + 1))
    y = [int(k) for k in rng.integers(1, V + 1, size=U)]
    return random_lattice(rng, T, U, V), y


def random_ctc_instance(rng: np.random.Generator, max_T: int = 5, max_U: int = 4, max_V: int = 4):
    """Random frame posteriors with a random (possibly infeasible) target."""
    T = int(rng.integers(1, max_T + 1))
    U = int(rng.integers(0, max_U + 1))
    V = int(rng.integers(1, max_V + 1))
    y = [int(k) for k in rng.integers(1, V + 1, size=U)]
    return log_softmax(rng.normal(0.0, 1.0, size=(T, V + 1))), y


def tiny_search_instance(seed: int, max_T: int = 4, max_V: int = 3) -> Tuple[TableScorer, int]:
    """Random tiny decoding problem: (scorer, T)."""
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, max_T + 1))
    V = int(rng.integers(2, max_V + 1))
    return random_table(V, T, seed=seed), T


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise relative error over entries where either side exceeds ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    mask = (np.abs(a) > floor) | (np.abs(n) > floor)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))))
