"""Error rates, real-time factor, expansion statistics and decoding sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from tlab.errors import ConfigError
from tlab.search import BeamConfig, DecodeReport, decode, fold_expansions

log = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "strategy", "param_name", "param_value", "beam", "cer",
    "rtf_mean", "rtf_std", "joint_calls", "decoder_calls",
]
TIMING_COLUMNS = ("rtf_mean", "rtf_std")

DEFAULT_GRIDS = {
    "alsd": ("u_max", (25, 50, 100)),
    "tsd": ("max_sym_exp", (2, 3, 4)),
    "nsc": ("nstep", (1, 2, 3)),
}
SWEEP_PARAMS = {"alsd": "u_max", "tsd": "max_sym_exp", "nsc": "nstep"}


def edit_distance(ref: Sequence, hyp: Sequence) -> Tuple[int, int, int, int]:
    """Unit-cost Levenshtein distance as (distance, substitutions, insertions, deletions).

    Among optimal alignments, ties prefer substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    # each cell holds (dist, subs, ins, dels)
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            d, s, ins, dl = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (d, s, ins, dl)
            else:
                best = (d + 1, s + 1, ins, dl)
            d, s, ins, dl = prev[j]
            if d + 1 < best[0]:
                best = (d + 1, s, ins, dl + 1)
            d, s, ins, dl = cur[j - 1]
            if d + 1 < best[0]:
                best = (d + 1, s, ins + 1, dl)
            cur.append(best)
        prev = cur
    return prev[m]


def error_rate(ref: Sequence, hyp: Sequence) -> float:
    return edit_distance(ref, hyp)[0] / max(1, len(ref))


def corpus_error_rate(pairs: Iterable[Tuple[Sequence, Sequence]]) -> float:
    """Total edit distance over total reference length."""
    dist = ref_len = 0
    for ref, hyp in pairs:
        dist += edit_distance(ref, hyp)[0]
        ref_len += len(ref)
    return dist / max(1, ref_len)


@dataclass
class RTFResult:
    mean: float
    std: float
    values: List[float]


def measure_rtf(runs: Sequence, frame_duration_s: float = 0.01) -> RTFResult:
    """RTF of each run as wall_time / (num_frames * frame_duration_s).

    ``runs`` holds objects with ``wall_time`` and ``num_frames`` (decode
    reports qualify). Zero-duration runs are skipped with a warning. The
    standard deviation is the population one.
    """
    if not runs:
        raise ConfigError("measure_rtf needs at least one run")
    if frame_duration_s <= 0:
        raise ConfigError("frame_duration_s must be positive")
    values = []
    for run in runs:
        duration = run.num_frames * frame_duration_s
        if duration <= 0:
            log.warning("skipping zero-duration utterance in RTF measurement")
            continue
        values.append(run.wall_time / duration)
    if not values:
        return RTFResult(float("nan"), float("nan"), [])
    mean = math.fsum(values) / len(values)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))
    return RTFResult(mean, std, values)


def expansion_stats(histograms: Iterable) -> List[Tuple[str, float]]:
    """Percentage of frames needing 1, 2 and 3+ expansions.

    Accepts decode reports or raw histograms. A frame with no label still
    costs one expansion round, so it lands in the first bin.
    """
    pooled: Counter = Counter()
    for h in histograms:
        hist = h.expansion_histogram if isinstance(h, DecodeReport) else h
        pooled.update(fold_expansions(hist))
    total = sum(pooled.values())
    bins = [
        ("1", pooled.get(1, 0)),
        ("2", pooled.get(2, 0)),
        ("3+", sum(v for n, v in pooled.items() if n >= 3)),
    ]
    if total == 0:
        return [(name, 0.0) for name, _ in bins]
    return [(name, 100.0 * count / total) for name, count in bins]


def write_expansion_table(path, rows: Sequence[Tuple[str, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "percent"])
        for n, pct in rows:
            w.writerow([n, f"{pct:.2f}"])


@dataclass
class SweepSpec:
    strategy: str
    param_name: Optional[str] = None
    values: Tuple[int, ...] = ()
    beam_size: int = 5
    repetitions: int = 1
    frame_duration_s: float = 0.01
    base: BeamConfig = field(default_factory=BeamConfig)

    @classmethod
    def default(cls, strategy: str, **kw) -> "SweepSpec":
        if strategy not in DEFAULT_GRIDS:
            raise ConfigError(f"no default grid for strategy {strategy!r}")
        name, values = DEFAULT_GRIDS[strategy]
        return cls(strategy=strategy, param_name=name, values=values, **kw)

    def validate(self) -> "SweepSpec":
        if self.strategy not in SWEEP_PARAMS:
            raise ConfigError(f"sweeps cover {tuple(SWEEP_PARAMS)}, got {self.strategy!r}")
        expected = SWEEP_PARAMS[self.strategy]
        if self.param_name not in (None, expected):
            raise ConfigError(f"{self.strategy} sweeps {expected}, not {self.param_name}")
        if not self.values:
            raise ConfigError("sweep grid is empty")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.frame_duration_s <= 0:
            raise ConfigError("frame_duration_s must be positive")
        return self

    def configs(self) -> List[BeamConfig]:
        self.validate()
        name = SWEEP_PARAMS[self.strategy]
        out = []
        for v in self.values:
            cfg = replace(self.base, strategy=self.strategy, beam_size=self.beam_size, **{name: int(v)})
            out.append(cfg.validate())
        return out


def _decode_one(args):
    scorer, features, cfg, lm = args
    return decode(scorer, features, cfg, lm)


def decode_all(scorer, feature_list: Sequence, cfg: BeamConfig, lm=None, jobs: int = 1) -> List[DecodeReport]:
    """Decode every utterance; ``jobs > 1`` spreads utterances over worker processes, order kept."""
    if jobs <= 1 or len(feature_list) < 2:
        return [decode(scorer, f, cfg, lm) for f in feature_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_decode_one, [(scorer, f, cfg, lm) for f in feature_list]))


def sweep(scorer, dataset, spec: SweepSpec, lm=None) -> List[Dict]:
    """One row per grid point over the whole dataset.

    Timed runs are serial. CER and call counts come from the first repetition;
    decoding is deterministic so later repetitions only add timing samples.
    """
    rows = []
    name = SWEEP_PARAMS[spec.validate().strategy]
    utts = list(dataset.utterances)
    for cfg in spec.configs():
        rtf_runs = []
        first: Optional[List[DecodeReport]] = None
        for _ in range(spec.repetitions):
            start = time.perf_counter()
            reports = [decode(scorer, u.features, cfg, lm) for u in utts]
            wall = time.perf_counter() - start
            frames = sum(r.num_frames for r in reports)
            rtf_runs.append(_Run(wall, frames))
            if first is None:
                first = reports
        rtf = measure_rtf(rtf_runs, spec.frame_duration_s)
        rows.append({
            "strategy": spec.strategy,
            "param_name": name,
            "param_value": getattr(cfg, name),
            "beam": cfg.beam_size,
            "cer": corpus_error_rate((u.labels, r.best) for u, r in zip(utts, first)),
            "rtf_mean": rtf.mean,
            "rtf_std": rtf.std,
            "joint_calls": sum(r.joint_calls for r in first),
            "decoder_calls": sum(r.decoder_calls for r in first),
        })
    return rows


@dataclass
class _Run:
    wall_time: float
    num_frames: int


def write_sweep_csv(path, rows: Sequence[Dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            out = dict(row)
            out["cer"] = f"{row['cer']:.6f}"
            out["rtf_mean"] = f"{row['rtf_mean']:.6g}"
            out["rtf_std"] = f"{row['rtf_std']:.6g}"
            w.writerow(out)
