"""Transducer, CTC and auxiliary training criteria with their gradients.

All dynamic programs run in the log domain. Gradients are returned with
respect to log-probabilities; :func:`tlab.scorer.backprop` carries them
through the log-softmax into the parameters.

Lattice indexing is 0-based here: ``lattice[t, u, k]`` for frame ``t`` in
``0..T-1``, decoder position ``u`` in ``0..U`` and symbol ``k`` (blank is 0).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, fields
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from tlab.errors import ConfigError, ContractError, SizeGuardError
from tlab.scorer import (
    BLANK,
    LatticeBundle,
    ModelParameters,
    Upstream,
    backprop,
    compute_lattice,
)

NEG_INF = -np.inf
BRUTE_FORCE_MAX = 14


def _lse2(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def _check(lattice: np.ndarray, y: Sequence[int]) -> Tuple[int, int]:
    lattice = np.asarray(lattice)
    if lattice.ndim != 3:
        raise ContractError("lattice must be T x (U+1) x (V+1)")
    T, U1, V1 = lattice.shape
    if U1 != len(y) + 1:
        raise ContractError(f"lattice has {U1 - 1} label positions but y has {len(y)}")
    if T < 1:
        raise ContractError("lattice needs at least one frame")
    for k in y:
        if not 1 <= k < V1:
            raise ContractError(f"label {k} outside 1..{V1 - 1}")
    return T, len(y)


# ---------------------------------------------------------------------------
# transducer


def forward_vars(lattice: np.ndarray, y: Sequence[int]) -> Tuple[np.ndarray, float]:
    """Forward variables and total log-likelihood of ``y``.

    ``alpha[t, u]`` is the log-probability of reaching lattice point (t, u)
    before emitting anything there.
    """
    T, U = _check(lattice, y)
    blank = lattice[:, :, BLANK]
    emit = np.array([[lattice[t, u, y[u]] for u in range(U)] for t in range(T)]).reshape(T, U)
    alpha = np.full((T, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else NEG_INF
            b = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else NEG_INF
            alpha[t, u] = _lse2(a, b)
    return alpha, float(alpha[T - 1, U] + blank[T - 1, U])


def backward_vars(lattice: np.ndarray, y: Sequence[int]) -> np.ndarray:
    """Backward variables; ``beta[t, u]`` includes the emission made at (t, u)."""
    T, U = _check(lattice, y)
    blank = lattice[:, :, BLANK]
    beta = np.full((T, U + 1), NEG_INF)
    beta[T - 1, U] = blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            a = beta[t + 1, u] + blank[t, u] if t < T - 1 else NEG_INF
            b = beta[t, u + 1] + lattice[t, u, y[u]] if u < U else NEG_INF
            beta[t, u] = _lse2(a, b)
    return beta


def transducer_loss(lattice: np.ndarray, y: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood summed over alignments, and its lattice gradient."""
    lattice = np.asarray(lattice, dtype=np.float64)
    alpha, log_p = forward_vars(lattice, y)
    beta = backward_vars(lattice, y)
    T, U = len(alpha), len(y)
    grad = np.zeros_like(lattice)
    # occupation of each blank / label transition, negated
    next_beta = np.full((T, U + 1), NEG_INF)
    next_beta[:-1] = beta[1:]
    next_beta[T - 1, U] = 0.0
    grad[:, :, BLANK] = -np.exp(alpha + lattice[:, :, BLANK] + next_beta - log_p)
    for u in range(U):
        grad[:, u, y[u]] += -np.exp(alpha[:, u] + lattice[:, u, y[u]] + beta[:, u + 1] - log_p)
    return -log_p, grad


def iter_alignments(T: int, U: int):
    """Yield every alignment as a tuple of moves, 0 for blank and 1 for label.

    Alignments contain T blanks and U labels and always end with a blank.
    """
    for label_slots in itertools.combinations(range(T + U - 1), U):
        moves = [0] * (T + U)
        for slot in label_slots:
            moves[slot] = 1
        yield tuple(moves)


def brute_force_loss(lattice: np.ndarray, y: Sequence[int]) -> float:
    """Transducer loss by explicit enumeration of all alignments."""
    T, U = _check(lattice, y)
    if T + U > BRUTE_FORCE_MAX:
        raise SizeGuardError(f"T+U={T + U} exceeds enumeration guard {BRUTE_FORCE_MAX}")
    scores = []
    for moves in iter_alignments(T, U):
        t = u = 0
        s = 0.0
        for move in moves:
            if move == 0:
                s += lattice[t, u, BLANK]
                t += 1
            else:
                s += lattice[t, u, y[u]]
                u += 1
        scores.append(s)
    return -float(logsumexp(scores))


# ---------------------------------------------------------------------------
# CTC


def ctc_feasible(T: int, y: Sequence[int]) -> bool:
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + repeats <= T


def ctc_loss(frame_logprobs: np.ndarray, y: Sequence[int]) -> Tuple[float, np.ndarray]:
    """CTC negative log-likelihood over the blank-extended target.

    Infeasible targets return ``(inf, zeros)`` instead of raising.
    """
    lp = np.asarray(frame_logprobs, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError("frame log-probs must be T x (V+1)")
    T, V1 = lp.shape
    for k in y:
        if not 1 <= k < V1:
            raise ContractError(f"label {k} outside 1..{V1 - 1}")
    grad = np.zeros_like(lp)
    if T < 1 or not ctc_feasible(T, y):
        return math.inf, grad
    ext = [BLANK]
    for k in y:
        ext += [k, BLANK]
    S = len(ext)
    # a skip over a blank is allowed between distinct labels
    skip = [s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2] for s in range(S)]
    emis = lp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emis[0, 0]
    if S > 1:
        alpha[0, 1] = emis[0, 1]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _lse2(acc, alpha[t - 1, s - 1])
            if skip[s]:
                acc = _lse2(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + emis[t, s] if acc != NEG_INF else NEG_INF

    # beta excludes the emission at t
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + emis[t + 1, s]
            if s + 1 < S:
                acc = _lse2(acc, beta[t + 1, s + 1] + emis[t + 1, s + 1])
            if s + 2 < S and skip[s + 2]:
                acc = _lse2(acc, beta[t + 1, s + 2] + emis[t + 1, s + 2])
            beta[t, s] = acc

    ends = [alpha[T - 1, S - 1]]
    if S > 1:
        ends.append(alpha[T - 1, S - 2])
    log_p = float(logsumexp(ends))
    occ = alpha + beta - log_p
    for s, k in enumerate(ext):
        grad[:, k] -= np.exp(occ[:, s])
    return -log_p, grad


def ctc_collapse(path: Sequence[int]) -> Tuple[int, ...]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_brute_force(frame_logprobs: np.ndarray, y: Sequence[int]) -> float:
    """CTC loss by enumerating frame paths over blank and the symbols of ``y``."""
    lp = np.asarray(frame_logprobs, dtype=np.float64)
    T = lp.shape[0]
    alphabet = sorted({BLANK, *y})
    if len(alphabet) ** T > 2_000_000:
        raise SizeGuardError("CTC enumeration too large")
    target = tuple(y)
    scores = []
    for path in itertools.product(alphabet, repeat=T):
        if ctc_collapse(path) == target:
            scores.append(sum(lp[t, k] for t, k in enumerate(path)))
    if not scores:
        return math.inf
    return -float(logsumexp(scores))


# ---------------------------------------------------------------------------
# auxiliary criteria


def aux_transducer_loss(
    aux_lattices: Mapping[int, np.ndarray], y: Sequence[int]
) -> Tuple[float, Dict[int, np.ndarray]]:
    """Mean transducer loss over the auxiliary layers."""
    if not aux_lattices:
        raise ConfigError("auxiliary transducer loss needs at least one aux layer")
    n = len(aux_lattices)
    total = 0.0
    grads = {}
    for l, lat in aux_lattices.items():
        loss, g = transducer_loss(lat, y)
        total += loss
        grads[l] = g / n
    return total / n, grads


def symmetric_kl_rows(U: int) -> int:
    """Number of decoder positions averaged by the symmetric KL term."""
    return max(U, 1)


def symm_kl(
    main_lattice: np.ndarray,
    aux_lattices: Mapping[int, np.ndarray],
    indicator: Optional[Mapping[int, bool]] = None,
) -> Tuple[float, np.ndarray, Dict[int, np.ndarray]]:
    """Symmetrized KL between main and aux output distributions.

    Averages over frames and over decoder positions ``0..max(U,1)-1`` (the
    positions that predict a label), summing over enabled aux layers.
    Returns ``(loss, grad_main, grads_aux)``.
    """
    P = np.asarray(main_lattice, dtype=np.float64)
    T, U1, _ = P.shape
    rows = symmetric_kl_rows(U1 - 1)
    g_main = np.zeros_like(P)
    g_aux: Dict[int, np.ndarray] = {}
    total = 0.0
    scale = 1.0 / (T * rows)
    lp = P[:, :rows]
    p = np.exp(lp)
    for l, lat in aux_lattices.items():
        lat = np.asarray(lat, dtype=np.float64)
        if lat.shape != P.shape:
            raise ContractError("aux lattice shape differs from the main lattice")
        g_aux[l] = np.zeros_like(lat)
        if indicator is not None and not indicator.get(l, False):
            continue
        lq = lat[:, :rows]
        q = np.exp(lq)
        diff = lp - lq
        total += 0.5 * scale * float(np.sum((p - q) * diff))
        g_main[:, :rows] += 0.5 * scale * (p * diff + (p - q))
        g_aux[l][:, :rows] = 0.5 * scale * (-q * diff + (q - p))
    return total, g_main, g_aux


def lm_loss(
    lm_logprobs: np.ndarray, y: Sequence[int], smoothing: float = 0.1
) -> Tuple[float, np.ndarray]:
    """Label-smoothed cross-entropy of the decoder LM head, averaged over positions.

    The target puts ``1 - smoothing`` on the true label and spreads
    ``smoothing`` uniformly over the V labels; blank receives no mass.
    """
    lp = np.asarray(lm_logprobs, dtype=np.float64)
    U = len(y)
    if U == 0:
        return 0.0, np.zeros_like(lp)
    if lp.shape[0] != U:
        raise ContractError("lm log-probs must have one row per label")
    V = lp.shape[1] - 1
    target = np.full(lp.shape, smoothing / V)
    target[:, BLANK] = 0.0
    target[np.arange(U), list(y)] += 1.0 - smoothing
    loss = -float(np.sum(target * lp)) / U
    return loss, -target / U


# ---------------------------------------------------------------------------
# combination


TASKS = ("trans", "ctc", "aux_trans", "symm_kl", "lm")


@dataclass(frozen=True)
class TaskWeights:
    trans: float = 1.0
    ctc: float = 0.0
    aux_trans: float = 0.0
    symm_kl: float = 0.0
    lm: float = 0.0
    enabled: Tuple[str, ...] = TASKS

    def __post_init__(self):
        for name in TASKS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"weight for {name} must lie in [0, 1], got {value}")
        for name in self.enabled:
            if name not in TASKS:
                raise ConfigError(f"unknown task {name!r}")

    def weight(self, task: str) -> float:
        return getattr(self, task) if task in self.enabled else 0.0

    def active(self, task: str) -> bool:
        return self.weight(task) > 0.0

    def scaled(self, factor: float) -> "TaskWeights":
        """Every weight multiplied by ``factor`` (bounds are not re-checked)."""
        obj = object.__new__(TaskWeights)
        for f in fields(self):
            value = getattr(self, f.name)
            object.__setattr__(obj, f.name, value * factor if f.name in TASKS else value)
        return obj

    @classmethod
    def full(cls) -> "TaskWeights":
        """All five tasks at their default weights."""
        return cls(trans=1.0, ctc=0.5, aux_trans=0.3, symm_kl=0.2, lm=0.4)

    @classmethod
    def vanilla(cls) -> "TaskWeights":
        return cls(trans=1.0)


@dataclass
class LossBreakdown:
    l_trans: float = 0.0
    l_ctc: float = 0.0
    l_aux_trans: float = 0.0
    l_symm_kl: float = 0.0
    l_lm: float = 0.0
    l_total: float = 0.0
    skipped: Tuple[str, ...] = ()

    def components(self) -> Dict[str, float]:
        return {t: getattr(self, "l_" + t) for t in TASKS}


def total_loss(components: Mapping[str, float], weights: TaskWeights) -> LossBreakdown:
    """Weighted sum of component losses; disabled tasks contribute zero."""
    values = {t: float(components.get(t, 0.0)) if weights.active(t) else 0.0 for t in TASKS}
    total = sum(weights.weight(t) * values[t] for t in TASKS)
    return LossBreakdown(
        **{"l_" + t: values[t] for t in TASKS},
        l_total=total,
    )


def evaluate(
    bundle: LatticeBundle,
    weights: TaskWeights,
    smoothing: float = 0.1,
    aux_indicator: Optional[Mapping[int, bool]] = None,
) -> Tuple[LossBreakdown, Upstream]:
    """Compute every enabled loss on a bundle and the weighted upstream gradients."""
    y = bundle.labels
    comps: Dict[str, float] = {}
    skipped = []
    up = Upstream(lattice=np.zeros_like(bundle.lattice))
    if weights.active("trans"):
        comps["trans"], g = transducer_loss(bundle.lattice, y)
        up.lattice += weights.trans * g
    if weights.active("ctc"):
        loss, g = ctc_loss(bundle.ctc, y)
        if math.isinf(loss):
            skipped.append("ctc")
        else:
            comps["ctc"] = loss
            up.ctc = weights.ctc * g
    if weights.active("aux_trans"):
        if not bundle.aux:
            raise ConfigError("aux_trans enabled but the model has no aux layers")
        comps["aux_trans"], gs = aux_transducer_loss(bundle.aux, y)
        for l, g in gs.items():
            up.aux[l] = weights.aux_trans * g
    if weights.active("symm_kl"):
        if not bundle.aux:
            raise ConfigError("symm_kl enabled but the model has no aux layers")
        indicator = aux_indicator or {l: True for l in bundle.aux}
        comps["symm_kl"], g_main, gs = symm_kl(bundle.lattice, bundle.aux, indicator)
        up.lattice += weights.symm_kl * g_main
        for l, g in gs.items():
            up.aux_open[l] = weights.symm_kl * g
    if weights.active("lm"):
        comps["lm"], g = lm_loss(bundle.lm, y, smoothing)
        up.lm = weights.lm * g
    breakdown = total_loss(comps, weights)
    breakdown.skipped = tuple(skipped)
    return breakdown, up


def objective(
    params: ModelParameters,
    features: np.ndarray,
    labels: Sequence[int],
    weights: TaskWeights,
    smoothing: float = 0.1,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Total loss of one utterance and its gradient for every parameter tensor."""
    bundle = compute_lattice(params, features, labels)
    breakdown, up = evaluate(bundle, weights, smoothing)
    return breakdown, backprop(params, bundle, up)


def objective_value(
    params: ModelParameters,
    features: np.ndarray,
    labels: Sequence[int],
    weights: TaskWeights,
    smoothing: float = 0.1,
) -> float:
    bundle = compute_lattice(params, features, labels)
    breakdown, _ = evaluate(bundle, weights, smoothing)
    return breakdown.l_total
