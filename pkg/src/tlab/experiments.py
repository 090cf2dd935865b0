"""Desk-scale experiments shared by the acceptance tests and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from tlab.bench import corpus_error_rate, expansion_stats
from tlab.losses import TaskWeights
from tlab.scorer import ModelConfig, init_parameters
from tlab.search import BeamConfig, ModelScorer, decode
from tlab.trainer import EpochLog, SyntheticTask, TrainConfig, ablation_recipe, gen_synthetic, train


@dataclass
class CopyRun:
    logs: List[EpochLog]
    seconds: float

    @property
    def best_accuracy(self) -> float:
        return max((e.greedy_seq_acc for e in self.logs), default=0.0)

    def epochs_to(self, target: float) -> Optional[int]:
        for e in self.logs:
            if e.greedy_seq_acc >= target:
                return e.epoch
        return None


def copy_task(seed: int = 0, epochs: int = 30, lr: float = 1e-3, batch_size: int = 4,
              count: int = 500, vocab: int = 4, stop_at: Optional[float] = None) -> CopyRun:
    """Vanilla transducer on the noiseless copy task.

    ``stop_at`` ends training once held-out greedy accuracy reaches it.
    """
    data = gen_synthetic(SyntheticTask("copy", vocab, (2, 5), count=count, seed=seed))
    params = init_parameters(ModelConfig(input_dim=vocab + 1, vocab_size=vocab, seed=seed))
    cfg = TrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)

    class _Stop(Exception):
        pass

    logs: List[EpochLog] = []

    def watch(entry, _params):
        logs.append(entry)
        if stop_at is not None and entry.greedy_seq_acc >= stop_at:
            raise _Stop

    start = time.perf_counter()
    try:
        train(params, data, cfg, callback=watch)
    except _Stop:
        pass
    return CopyRun(logs, time.perf_counter() - start)


@dataclass
class ExpansionRun:
    weights: TaskWeights
    one_share: float
    raw_one_share: float
    table: List[Tuple[str, float]]
    accuracy: float
    cer: float


def _raw_one_share(reports) -> float:
    # share of frames emitting exactly one label, blank-only frames kept apart
    pooled: Dict[int, int] = {}
    for r in reports:
        for n, c in r.expansion_histogram.items():
            pooled[n] = pooled.get(n, 0) + c
    total = sum(pooled.values())
    return 100.0 * pooled.get(1, 0) / total if total else 0.0


def repeat2_expansions(weights: TaskWeights, seed: int, epochs: int = 15, count: int = 300,
                       vocab: int = 4, lr: float = 3e-3, beam: int = 4) -> ExpansionRun:
    """Train on repeat2 and measure how labels spread over frames at decode time."""
    task = SyntheticTask("repeat2", vocab, (2, 6), count=count, seed=seed)
    data = gen_synthetic(task)
    params = init_parameters(ModelConfig(input_dim=task.input_dim, vocab_size=vocab, seed=seed))
    cfg = TrainConfig(weights=weights, epochs=epochs, lr=lr, seed=seed)
    params, logs = train(params, data, cfg)
    _, held = data.split(cfg.held_out)
    scorer = ModelScorer(params)
    reports = [decode(scorer, u.features, BeamConfig(strategy="default", beam_size=beam)) for u in held.utterances]
    table = expansion_stats(reports)
    return ExpansionRun(
        weights=weights,
        one_share=table[0][1],
        raw_one_share=_raw_one_share(reports),
        table=table,
        accuracy=logs[-1].greedy_seq_acc,
        cer=corpus_error_rate((u.labels, r.best) for u, r in zip(held.utterances, reports)),
    )


@dataclass
class PairedComparison:
    seeds: List[int]
    vanilla: List[ExpansionRun] = field(default_factory=list)
    auxiliary: List[ExpansionRun] = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(a.one_share > v.one_share for v, a in zip(self.vanilla, self.auxiliary))


def ctc_direction(seeds=(0, 1, 2, 3, 4), ctc_weight: float = 0.5, **kw) -> PairedComparison:
    """Vanilla vs vanilla plus CTC, paired by seed."""
    out = PairedComparison(list(seeds))
    for seed in seeds:
        out.vanilla.append(repeat2_expansions(TaskWeights.vanilla(), seed, **kw))
        out.auxiliary.append(repeat2_expansions(TaskWeights(ctc=ctc_weight), seed, **kw))
    return out


def ablation(seed: int = 0, epochs: int = 10, count: int = 200, vocab: int = 4, lr: float = 3e-3):
    """Cumulatively drop auxiliary tasks; returns (name, held-out CER, greedy accuracy) rows."""
    task = SyntheticTask("repeat2", vocab, (2, 6), noise_std=0.3, count=count, seed=seed)
    data = gen_synthetic(task)
    _, held = data.split()
    rows = []
    for name, weights in ablation_recipe():
        cfg_model = ModelConfig(input_dim=task.input_dim, vocab_size=vocab, seed=seed,
                                aux_layer_indices=(1,) if weights.active("aux_trans") or weights.active("symm_kl") else ())
        params, logs = train(init_parameters(cfg_model), data, TrainConfig(weights=weights, epochs=epochs, lr=lr, seed=seed))
        scorer = ModelScorer(params)
        hyps = [decode(scorer, u.features, BeamConfig(strategy="greedy")).best for u in held.utterances]
        rows.append((name, corpus_error_rate(zip((u.labels for u in held.utterances), hyps)), logs[-1].greedy_seq_acc))
    return rows
