"""Greedy and beam-search decoding for transducer models.

Strategies: ``default`` (Graves-style search without prefix search),
``alsd`` (alignment-length synchronous), ``tsd`` (time synchronous) and
``nsc`` (N-step constrained). All of them talk to a :class:`Scorer`, which
hides whether the decoder/joint is the reference model or a hand-built table.

Scores are natural-log probabilities. Every search counts joint evaluations
and decoder steps per hypothesis (a batched call of size N counts N).
"""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from tlab.errors import ConfigError
from tlab.scorer import (
    BLANK,
    START,
    ModelParameters,
    batch_decode_step,
    encode,
    joint,
    log_softmax,
    zero_state,
)

log = logging.getLogger(__name__)

STRATEGIES = ("greedy", "default", "alsd", "tsd", "nsc")


class Scorer(Protocol):
    """What the searches need from a model."""

    vocab_size: int

    def encode(self, features) -> Sequence[Any]: ...

    def initial_state(self) -> Any: ...

    def batch_decode(self, labels: Sequence[int], states: Sequence[Any]) -> Tuple[list, list]: ...

    def batch_joint(self, enc_t: Any, dec_outs: Sequence[Any]) -> np.ndarray: ...


class ModelScorer:
    """Scorer backed by :class:`ModelParameters`."""

    def __init__(self, params: ModelParameters):
        self.params = params
        self.vocab_size = params.config.vocab_size

    def encode(self, features):
        return list(encode(self.params, features).main)

    def initial_state(self):
        return zero_state(self.params)

    def batch_decode(self, labels, states):
        return batch_decode_step(self.params, list(labels), list(states))

    def batch_joint(self, enc_t, dec_outs):
        return log_softmax(joint(self.params, enc_t, np.stack(dec_outs)))


class LanguageModel(Protocol):
    """Stateful next-label scorer used for shallow fusion.

    ``start`` and ``step`` return the new state and log-probabilities over
    the V+1 outputs; index 0 is ignored.
    """

    def start(self) -> Tuple[Any, np.ndarray]: ...

    def step(self, state: Any, label: int) -> Tuple[Any, np.ndarray]: ...


class DecoderLM:
    """Recurrent LM made of a model's decoder and its LM head.

    Probabilities are renormalized over the V labels.
    """

    def __init__(self, params: ModelParameters):
        self.params = params

    def _scores(self, out):
        logits = out @ self.params["lm.W"] + self.params["lm.b"]
        logits = logits.copy()
        logits[BLANK] = -np.inf
        shifted = logits[1:] - logits[1:].max()
        lp = np.full(len(logits), -np.inf)
        lp[1:] = shifted - np.log(np.exp(shifted).sum())
        return lp

    def start(self):
        outs, states = batch_decode_step(self.params, [START], [zero_state(self.params)])
        return states[0], self._scores(outs[0])

    def step(self, state, label):
        outs, states = batch_decode_step(self.params, [label], [state])
        return states[0], self._scores(outs[0])


class UniformLM:
    def __init__(self, vocab_size: int):
        self.lp = np.full(vocab_size + 1, -np.log(vocab_size))
        self.lp[BLANK] = -np.inf

    def start(self):
        return None, self.lp

    def step(self, state, label):
        return None, self.lp


@dataclass
class BeamConfig:
    strategy: str = "default"
    beam_size: int = 5
    nbest: int = 1
    u_max: int = 50
    max_sym_exp: int = 2
    nstep: int = 1
    auto_nstep: int = 1
    prefix_alpha: int = 2
    lm_weight: float = 0.0
    lm_enabled: bool = False
    max_symbols_per_frame: int = 10

    def validate(self) -> "BeamConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        checks = {
            "beam_size": self.beam_size,
            "nbest": self.nbest,
            "u_max": self.u_max,
            "max_sym_exp": self.max_sym_exp,
            "nstep": self.nstep,
            "auto_nstep": self.auto_nstep,
            "prefix_alpha": self.prefix_alpha,
            "max_symbols_per_frame": self.max_symbols_per_frame,
        }
        for name, value in checks.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.nbest > self.beam_size:
            raise ConfigError("nbest cannot exceed beam_size")
        if self.lm_weight < 0:
            raise ConfigError("lm_weight must be non-negative")
        return self

    def param_string(self) -> str:
        s = self.strategy
        if s == "greedy":
            return ""
        parts = [f"beam={self.beam_size}"]
        if s == "alsd":
            parts.append(f"u_max={self.u_max}")
        elif s == "tsd":
            parts.append(f"max_sym_exp={self.max_sym_exp}")
        elif s == "nsc":
            parts += [f"nstep={self.nstep}", f"auto_nstep={self.auto_nstep}", f"alpha={self.prefix_alpha}"]
        if self.lm_enabled:
            parts.append(f"lm_weight={self.lm_weight}")
        return ";".join(parts)


@dataclass
class Hypothesis:
    labels: Tuple[int, ...]
    score: float
    dec_state: Any = None
    dec_out: Any = None
    lm_state: Any = None
    lm_logp: Optional[np.ndarray] = None
    # frame index (0-based) at which each label was emitted
    frames: Tuple[int, ...] = ()


@dataclass
class DecodeReport:
    strategy: str
    nbest: List[Tuple[Tuple[int, ...], float]]
    joint_calls: int
    decoder_calls: int
    wall_time: float
    expansion_histogram: Dict[int, int]
    num_frames: int
    complete: bool = True
    hypotheses: List[Hypothesis] = field(default_factory=list, repr=False)

    @property
    def best(self) -> Tuple[int, ...]:
        return self.nbest[0][0] if self.nbest else ()

    @property
    def best_score(self) -> float:
        return self.nbest[0][1] if self.nbest else float("-inf")


def sort_key(h: Hypothesis):
    return (-h.score, len(h.labels), h.labels)


def sort_hyps(hyps: Iterable[Hypothesis]) -> List[Hypothesis]:
    return sorted(hyps, key=sort_key)


def _logaddexp(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def recombine(hyps: Iterable[Hypothesis]) -> List[Hypothesis]:
    """Merge hypotheses sharing a label sequence.

    The merged score is the log-sum-exp of the members; the state (and the
    frame trace) of the best member is kept. Output order follows first
    appearance of each sequence.
    """
    groups: Dict[Tuple[int, ...], List[Hypothesis]] = {}
    for h in hyps:
        groups.setdefault(h.labels, []).append(h)
    out = []
    for members in groups.values():
        if len(members) == 1:
            out.append(members[0])
            continue
        best = min(members, key=lambda h: (-h.score, h.frames))
        scores = np.array([h.score for h in members])
        # sort before summing so the result is independent of input order
        total = float(np.logaddexp.reduce(np.sort(scores)))
        out.append(replace(best, score=total))
    return out


def lm_fusion_extend(hyp: Hypothesis, label: int, lm_weight: float) -> float:
    """Shallow-fusion term added to a label extension of ``hyp``."""
    if hyp.lm_logp is None:
        return 0.0
    return lm_weight * float(hyp.lm_logp[label])


def expansion_histogram(frames: Sequence[int], num_frames: int) -> Dict[int, int]:
    """Map n -> number of frames on which exactly n labels were emitted."""
    per_frame = Counter(frames)
    hist = Counter(per_frame.get(t, 0) for t in range(num_frames))
    return dict(sorted(hist.items()))


class _Search:
    """Per-call bookkeeping: counters and decoder/LM caches keyed by label prefix."""

    def __init__(self, scorer: Scorer, cfg: BeamConfig, lm: Optional[LanguageModel]):
        self.scorer = scorer
        self.cfg = cfg
        self.V = scorer.vocab_size
        self.lm = lm if (lm is not None and cfg.lm_enabled) else None
        self.lm_weight = cfg.lm_weight if self.lm is not None else 0.0
        self.joint_calls = 0
        self.decoder_calls = 0
        self._dec: Dict[Tuple[int, ...], Tuple[Any, Any]] = {}
        self._lm: Dict[Tuple[int, ...], Tuple[Any, np.ndarray]] = {}

    def root(self) -> Hypothesis:
        outs, states = self.scorer.batch_decode([START], [self.scorer.initial_state()])
        self.decoder_calls += 1
        self._dec[()] = (outs[0], states[0])
        h = Hypothesis(labels=(), score=0.0, dec_state=states[0], dec_out=outs[0])
        if self.lm is not None:
            self._lm[()] = self.lm.start()
            h.lm_state, h.lm_logp = self._lm[()]
        return h

    def resolve(self, hyps: Sequence[Hypothesis]) -> List[Hypothesis]:
        """Attach decoder (and LM) outputs, batching every cache miss in one call."""
        missing = []
        seen = set()
        for h in hyps:
            if h.labels not in self._dec and h.labels not in seen:
                seen.add(h.labels)
                missing.append(h.labels)
        if missing:
            parents = [self._dec[y[:-1]][1] for y in missing]
            outs, states = self.scorer.batch_decode([y[-1] for y in missing], parents)
            self.decoder_calls += len(missing)
            for y, o, s in zip(missing, outs, states):
                self._dec[y] = (o, s)
        if self.lm is not None:
            for y in {h.labels for h in hyps}:
                if y not in self._lm:
                    self._lm[y] = self.lm.step(self._lm[y[:-1]][0], y[-1])
        out = []
        for h in hyps:
            o, s = self._dec[h.labels]
            h = replace(h, dec_out=o, dec_state=s)
            if self.lm is not None:
                h.lm_state, h.lm_logp = self._lm[h.labels]
            out.append(h)
        return out

    def joint(self, enc_t, hyps: Sequence[Hypothesis]) -> np.ndarray:
        self.joint_calls += len(hyps)
        return self.scorer.batch_joint(enc_t, [h.dec_out for h in hyps])

    def extend(self, h: Hypothesis, k: int, logp: float, t: int) -> Hypothesis:
        score = h.score + logp + lm_fusion_extend(h, k, self.lm_weight)
        return Hypothesis(labels=h.labels + (k,), score=score, frames=h.frames + (t,))

    def blank(self, h: Hypothesis, logp: float) -> Hypothesis:
        return replace(h, score=h.score + logp)

    def report(self, strategy, hyps, T, start, complete=True) -> DecodeReport:
        final = sort_hyps(recombine(hyps))[: self.cfg.nbest]
        hist = expansion_histogram(final[0].frames, T) if final else {0: T}
        return DecodeReport(
            strategy=strategy,
            nbest=[(h.labels, h.score) for h in final],
            joint_calls=self.joint_calls,
            decoder_calls=self.decoder_calls,
            wall_time=time.perf_counter() - start,
            expansion_histogram=hist,
            num_frames=T,
            complete=complete,
            hypotheses=final,
        )


def greedy(scorer: Scorer, features, cfg: Optional[BeamConfig] = None, lm=None) -> DecodeReport:
    """Best-symbol decoding; ties go to blank, then to the lowest label."""
    cfg = cfg or BeamConfig(strategy="greedy")
    start = time.perf_counter()
    enc = scorer.encode(features)
    s = _Search(scorer, replace(cfg, nbest=1, lm_enabled=False), None)
    hyp = s.root()
    for t, enc_t in enumerate(enc):
        emitted = 0
        while True:
            lp = s.joint(enc_t, [hyp])[0]
            k = int(np.argmax(lp))
            if k == BLANK:
                hyp = s.blank(hyp, float(lp[BLANK]))
                break
            hyp = s.resolve([s.extend(hyp, k, float(lp[k]), t)])[0]
            emitted += 1
            if emitted >= cfg.max_symbols_per_frame:
                break
    return s.report("greedy", [hyp], len(enc), start)


def default_beam_search(scorer: Scorer, features, cfg: BeamConfig, lm=None) -> DecodeReport:
    """Graves-style search with prefix search replaced by merging duplicates in B."""
    start = time.perf_counter()
    enc = scorer.encode(features)
    T = len(enc)
    s = _Search(scorer, cfg, lm)
    beam = cfg.beam_size
    B = [s.root()]
    for t, enc_t in enumerate(enc):
        A = B
        B_index: Dict[Tuple[int, ...], Hypothesis] = {}
        while A:
            best = min(A, key=sort_key)
            A.remove(best)
            best = s.resolve([best])[0]
            lp = s.joint(enc_t, [best])[0]
            blanked = s.blank(best, float(lp[BLANK]))
            if blanked.labels in B_index:
                B_index[blanked.labels] = recombine([B_index[blanked.labels], blanked])[0]
            else:
                B_index[blanked.labels] = blanked
            # hard cap on total emissions guarantees termination
            if len(best.labels) < T:
                for k in range(1, s.V + 1):
                    new = s.extend(best, k, float(lp[k]), t)
                    for j, other in enumerate(A):
                        if other.labels == new.labels:
                            # same lattice point reached twice: keep one entry
                            A[j] = recombine([other, new])[0]
                            break
                    else:
                        A.append(new)
            if not A:
                break
            a_best = max(h.score for h in A)
            if sum(1 for h in B_index.values() if h.score > a_best) >= beam:
                break
        B = sort_hyps(B_index.values())[:beam]
    return s.report("default", B, T, start)


def alsd(scorer: Scorer, features, cfg: BeamConfig, lm=None) -> DecodeReport:
    """Alignment-length synchronous decoding."""
    start = time.perf_counter()
    enc = scorer.encode(features)
    T = len(enc)
    u_max = max(0, min(cfg.u_max, T - 1))
    s = _Search(scorer, cfg, lm)
    B = [s.root()]
    F: List[Hypothesis] = []
    for i in range(1, T + u_max + 1):
        live = [h for h in B if i - len(h.labels) <= T]
        if not live:
            continue
        live = s.resolve(live)
        A: List[Hypothesis] = []
        # hypotheses in B sit on different frames, so score each against its own frame
        by_frame: Dict[int, List[int]] = {}
        for idx, h in enumerate(live):
            by_frame.setdefault(i - len(h.labels), []).append(idx)
        logps: Dict[int, np.ndarray] = {}
        for t1, idxs in sorted(by_frame.items()):
            rows = s.joint(enc[t1 - 1], [live[j] for j in idxs])
            for j, row in zip(idxs, rows):
                logps[j] = row
        for idx, h in enumerate(live):
            t1 = i - len(h.labels)
            lp = logps[idx]
            blanked = s.blank(h, float(lp[BLANK]))
            A.append(blanked)
            if t1 == T:
                F.append(blanked)
            for k in range(1, s.V + 1):
                A.append(s.extend(h, k, float(lp[k]), t1 - 1))
        B = sort_hyps(recombine(A))[: cfg.beam_size]
    if F:
        return s.report("alsd", F, T, start)
    log.warning("alsd: no hypothesis reached the last frame; returning partial hypotheses")
    return s.report("alsd", s.resolve(B), T, start, complete=False)


def tsd(scorer: Scorer, features, cfg: BeamConfig, lm=None) -> DecodeReport:
    """Time synchronous decoding with up to ``max_sym_exp - 1`` labels per frame."""
    start = time.perf_counter()
    enc = scorer.encode(features)
    T = len(enc)
    s = _Search(scorer, cfg, lm)
    beam = cfg.beam_size
    B = [s.root()]
    for t, enc_t in enumerate(enc):
        A: Dict[Tuple[int, ...], Hypothesis] = {}
        C = B
        for v in range(1, cfg.max_sym_exp + 1):
            if not C:
                break
            C = s.resolve(C)
            lps = s.joint(enc_t, C)
            D: List[Hypothesis] = []
            for h, lp in zip(C, lps):
                blanked = s.blank(h, float(lp[BLANK]))
                if h.labels not in A:
                    A[h.labels] = blanked
                else:
                    A[h.labels] = recombine([A[h.labels], blanked])[0]
                if v < cfg.max_sym_exp:
                    for k in range(1, s.V + 1):
                        D.append(s.extend(h, k, float(lp[k]), t))
            C = sort_hyps(D)[:beam]
        B = sort_hyps(A.values())[:beam]
    return s.report("tsd", B, T, start)


def _suffix_logprob(s: _Search, enc_t, y: Tuple[int, ...], start_len: int, rows) -> float:
    """Log-probability of emitting ``y[start_len:]`` back to back on one frame."""
    total = 0.0
    for j in range(start_len, len(y)):
        prefix = y[:j]
        if prefix not in rows:
            h = s.resolve([Hypothesis(labels=prefix, score=0.0)])[0]
            rows[prefix] = (s.joint(enc_t, [h])[0], h)
        lp, h = rows[prefix]
        total += float(lp[y[j]]) + lm_fusion_extend(h, y[j], s.lm_weight)
    return total


def nsc(scorer: Scorer, features, cfg: BeamConfig, lm=None) -> DecodeReport:
    """N-step constrained beam search.

    Each frame starts by folding in the probability of reaching a hypothesis
    from a shorter one in the beam (prefix window ``prefix_alpha``), then runs
    ``nstep`` batched expansion rounds. Label extensions of the last round get
    a fresh blank score, except when ``nstep == 1`` and ``auto_nstep > 1``:
    those hypotheses move to the next frame without the blank transition.
    """
    start = time.perf_counter()
    enc = scorer.encode(features)
    T = len(enc)
    s = _Search(scorer, cfg, lm)
    beam = cfg.beam_size
    skip_final_blank = cfg.nstep == 1 and cfg.auto_nstep > 1
    B = [s.root()]
    for t, enc_t in enumerate(enc):
        A = s.resolve(sorted(B, key=lambda h: (len(h.labels), sort_key(h))))
        lp_front = s.joint(enc_t, A)
        rows = {h.labels: (lp, h) for h, lp in zip(A, lp_front)}

        # prefix accumulation uses the scores from before this frame's updates
        old = {h.labels: h.score for h in A}
        updated = []
        for h in A:
            score = h.score
            for cut in range(max(0, len(h.labels) - cfg.prefix_alpha + 1), len(h.labels)):
                prefix = h.labels[:cut]
                if prefix in old:
                    extra = old[prefix] + _suffix_logprob(s, enc_t, h.labels, cut, rows)
                    score = _logaddexp(score, extra)
            updated.append(replace(h, score=score))
        front = updated

        S: List[Hypothesis] = []
        in_S = set()
        V_hyps: List[Hypothesis] = []
        for n in range(cfg.nstep):
            if n > 0:
                lp_front = s.joint(enc_t, front)
            candidates = []
            for h, lp in zip(front, lp_front):
                S.append(s.blank(h, float(lp[BLANK])))
                in_S.add(h.labels)
                for k in range(1, s.V + 1):
                    candidates.append(s.extend(h, k, float(lp[k]), t))
            V_hyps = [h for h in sort_hyps(candidates) if h.labels not in in_S][:beam]
            if not V_hyps:
                break
            V_hyps = s.resolve(V_hyps)
            if n < cfg.nstep - 1:
                front = V_hyps
            elif not skip_final_blank:
                lp_v = s.joint(enc_t, V_hyps)
                V_hyps = [s.blank(h, float(lp[BLANK])) for h, lp in zip(V_hyps, lp_v)]
        B = sort_hyps(recombine(S + V_hyps))[:beam]
    return s.report("nsc", B, T, start)


_DISPATCH = {
    "greedy": greedy,
    "default": default_beam_search,
    "alsd": alsd,
    "tsd": tsd,
    "nsc": nsc,
}


def decode(scorer: Scorer, features, cfg: BeamConfig, lm: Optional[LanguageModel] = None) -> DecodeReport:
    cfg.validate()
    return _DISPATCH[cfg.strategy](scorer, features, cfg, lm)


def estimate_auto_nstep(
    scorer: Scorer,
    calibration: Sequence[Any],
    cfg: Optional[BeamConfig] = None,
    coverage: float = 0.995,
) -> Tuple[int, Dict[int, int]]:
    """Expansion budget covering ``coverage`` of frames under default beam search.

    Returns the estimate and the pooled expansion histogram of the best
    hypotheses (frames with no label count as one expansion).
    """
    if not calibration:
        raise ConfigError("auto N_step estimation needs at least one calibration utterance")
    cfg = replace(cfg or BeamConfig(), strategy="default")
    pooled: Counter = Counter()
    for features in calibration:
        report = default_beam_search(scorer, features, cfg)
        pooled.update(fold_expansions(report.expansion_histogram))
    return nstep_from_histogram(pooled, coverage), dict(sorted(pooled.items()))


def fold_expansions(histogram: Dict[int, int]) -> Dict[int, int]:
    """Expansions per frame: a frame emitting n labels needs max(n, 1) rounds."""
    folded: Counter = Counter()
    for n, count in histogram.items():
        folded[max(int(n), 1)] += count
    return dict(folded)


def nstep_from_histogram(histogram: Dict[int, float], coverage: float = 0.995) -> int:
    """Smallest n whose cumulative share reaches ``coverage``."""
    total = float(sum(histogram.values()))
    if total <= 0:
        return 1
    acc = 0.0
    for n in sorted(histogram):
        acc += histogram[n]
        # tolerance absorbs rounding in percentage tables
        if acc / total >= coverage - 1e-12:
            return max(int(n), 1)
    return max(int(max(histogram)), 1)


def expected_nstep(histogram: Dict[int, float]) -> int:
    """Mean expansions per frame, rounded up; an alternative to the coverage rule."""
    total = float(sum(histogram.values()))
    if total <= 0:
        return 1
    mean = sum(max(int(n), 1) * c for n, c in histogram.items()) / total
    return max(1, math.ceil(mean - 1e-12))
