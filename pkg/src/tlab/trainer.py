"""Synthetic tasks, the training loop and the ablation recipe."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tlab.errors import ConfigError, DivergenceError
from tlab.losses import TASKS, LossBreakdown, TaskWeights, objective
from tlab.scorer import ModelParameters
from tlab.search import ModelScorer, greedy

log = logging.getLogger(__name__)

TASK_KINDS = ("copy", "repeat2")
FILLER = 0


@dataclass(frozen=True)
class SyntheticTask:
    """Toy transduction problem.

    ``copy``: each label becomes two frames, a one-hot frame then a filler
    frame (T = 2U). ``repeat2``: each source symbol becomes a one-hot frame
    and two filler frames, and the target repeats every symbol twice
    (U = 2S, T = 3S); sources never repeat a symbol back to back, so the
    target always fits a CTC alignment.

    Feature width is ``vocab_size + 1``; channel 0 marks filler frames.
    """

    kind: str = "copy"
    vocab_size: int = 4
    u_range: Tuple[int, int] = (2, 5)
    t_range: Optional[Tuple[int, int]] = None
    noise_std: float = 0.0
    count: int = 500
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.vocab_size + 1

    def frames_for(self, U: int) -> int:
        return 2 * U if self.kind == "copy" else 3 * (U // 2)

    def allowed_lengths(self) -> List[int]:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 1 or self.count < 1 or self.noise_std < 0:
            raise ConfigError("vocab_size and count must be positive, noise_std non-negative")
        lo, hi = self.u_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad u_range {self.u_range}")
        lengths = list(range(lo, hi + 1))
        if self.kind == "repeat2":
            lengths = [u for u in lengths if u % 2 == 0 and u > 0]
            if self.vocab_size < 2 and any(u > 2 for u in lengths):
                raise ConfigError("repeat2 needs vocab_size >= 2 for sources longer than one symbol")
        else:
            lengths = [u for u in lengths if u > 0]
        if self.t_range is not None:
            tlo, thi = self.t_range
            lengths = [u for u in lengths if tlo <= self.frames_for(u) <= thi]
        if not lengths:
            raise ConfigError(f"no target length satisfies u_range={self.u_range}, t_range={self.t_range}")
        return lengths


@dataclass
class Utterance:
    features: np.ndarray
    labels: Tuple[int, ...]


@dataclass
class Dataset:
    input_dim: int
    vocab_size: int
    utterances: List[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def split(self, held_out: float = 0.1) -> Tuple["Dataset", "Dataset"]:
        """Last ``held_out`` fraction becomes the evaluation split."""
        n_eval = max(1, int(round(len(self) * held_out))) if len(self) > 1 else 0
        cut = len(self) - n_eval
        return (
            Dataset(self.input_dim, self.vocab_size, self.utterances[:cut]),
            Dataset(self.input_dim, self.vocab_size, self.utterances[cut:]),
        )


def _source_symbols(rng, V: int, n: int, no_adjacent_repeat: bool) -> List[int]:
    out: List[int] = []
    for _ in range(n):
        if no_adjacent_repeat and out:
            k = int(rng.integers(1, V))
            out.append(k if k < out[-1] else k + 1)
        else:
            out.append(int(rng.integers(1, V + 1)))
    return out


def gen_synthetic(task: SyntheticTask) -> Dataset:
    lengths = task.allowed_lengths()
    rng = np.random.default_rng(task.seed)
    D = task.input_dim
    utts = []
    for _ in range(task.count):
        U = lengths[int(rng.integers(len(lengths)))]
        if task.kind == "copy":
            labels = _source_symbols(rng, task.vocab_size, U, False)
            source, per_symbol = labels, 2
        else:
            source = _source_symbols(rng, task.vocab_size, U // 2, True)
            labels = [k for k in source for _ in range(2)]
            per_symbol = 3
        feats = np.zeros((len(source) * per_symbol, D))
        for i, k in enumerate(source):
            feats[i * per_symbol, k] = 1.0
            feats[i * per_symbol + 1: (i + 1) * per_symbol, FILLER] = 1.0
        if task.noise_std > 0:
            feats = feats + rng.normal(0.0, task.noise_std, size=feats.shape)
        utts.append(Utterance(feats, tuple(labels)))
    return Dataset(D, task.vocab_size, utts)


# ---------------------------------------------------------------------------
# dataset file


def write_dataset(path, data: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(data)} {data.input_dim} {data.vocab_size}\n")
        for utt in data.utterances:
            fh.write(f"{utt.features.shape[0]} {len(utt.labels)}\n")
            for row in utt.features:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write(" ".join(str(k) for k in utt.labels) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    try:
        count, input_dim, V = (int(v) for v in lines[0].split())
        pos = 1
        utts = []
        for _ in range(count):
            T, U = (int(v) for v in lines[pos].split())
            pos += 1
            feats = np.array([[float(v) for v in lines[pos + i].split()] for i in range(T)])
            pos += T
            labels = tuple(int(v) for v in lines[pos].split())
            pos += 1
            if feats.shape != (T, input_dim) or len(labels) != U:
                raise ConfigError(f"utterance block near line {pos} is inconsistent")
            utts.append(Utterance(feats.reshape(T, input_dim), labels))
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"malformed dataset file {path}: {exc}") from exc
    return Dataset(input_dim, V, utts)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    weights: TaskWeights = field(default_factory=TaskWeights.vanilla)
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 10
    clip_norm: float = 5.0
    eval_interval: int = 1
    seed: int = 0
    smoothing: float = 0.1
    held_out: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.optimizer not in ("adam", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.clip_norm <= 0:
            raise ConfigError("clip norm must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be >= 1, epochs >= 0")
        return self


@dataclass
class EpochLog:
    epoch: int
    losses: LossBreakdown
    greedy_seq_acc: float

    def row(self) -> List:
        b = self.losses
        return [self.epoch, b.l_trans, b.l_ctc, b.l_aux_trans, b.l_symm_kl, b.l_lm, b.l_total, self.greedy_seq_acc]


LOG_COLUMNS = ["epoch", "l_trans", "l_ctc", "l_aux_trans", "l_symm_kl", "l_lm", "l_total", "greedy_seq_acc"]


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to a global norm of at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: ModelParameters, grads: Dict[str, np.ndarray]) -> ModelParameters:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        updates = {}
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.step_count)
            v_hat = v / (1 - b2 ** self.step_count)
            updates[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params.replace(updates)


class Momentum:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.vel: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParameters, grads: Dict[str, np.ndarray]) -> ModelParameters:
        updates = {}
        for name, g in grads.items():
            v = self.vel.get(name, 0.0) * self.momentum + g
            self.vel[name] = v
            updates[name] = params[name] - self.lr * v
        return params.replace(updates)


def sequence_accuracy(params: ModelParameters, data: Dataset) -> float:
    if not len(data):
        return float("nan")
    scorer = ModelScorer(params)
    hits = sum(greedy(scorer, u.features).best == u.labels for u in data.utterances)
    return hits / len(data)


def _mean_breakdown(rows: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(rows)
    out = LossBreakdown()
    for attr in ["l_" + t for t in TASKS] + ["l_total"]:
        setattr(out, attr, math.fsum(getattr(r, attr) for r in rows) / n)
    return out


def train(
    params: ModelParameters,
    data: Dataset,
    cfg: TrainConfig,
    callback=None,
) -> Tuple[ModelParameters, List[EpochLog]]:
    """Mini-batch training on the weighted total loss.

    Per-epoch logs average each utterance's losses as they were when its
    batch was processed, summed in dataset order.
    """
    cfg.validate()
    if not len(data):
        raise ConfigError("training set is empty")
    train_set, eval_set = data.split(cfg.held_out)
    if not len(train_set):
        train_set = data
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else Momentum(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    logs: List[EpochLog] = []
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        per_utt: List[Optional[LossBreakdown]] = [None] * n
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total: Optional[Dict[str, np.ndarray]] = None
            for idx in batch:
                utt = train_set.utterances[idx]
                breakdown, grads = objective(params, utt.features, utt.labels, cfg.weights, cfg.smoothing)
                if not math.isfinite(breakdown.l_total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, utterance {int(idx)}: {breakdown}"
                    )
                per_utt[idx] = breakdown
                if total is None:
                    total = grads
                else:
                    for k in total:
                        total[k] += grads[k]
            for k in total:
                total[k] /= len(batch)
            clip_gradients(total, cfg.clip_norm)
            params = opt.step(params, total)
        summary = _mean_breakdown(per_utt)
        acc = float("nan")
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            acc = sequence_accuracy(params, eval_set)
        entry = EpochLog(epoch, summary, acc)
        logs.append(entry)
        log.info("epoch %d total %.4f trans %.4f acc %.3f", epoch, summary.l_total, summary.l_trans, acc)
        if callback is not None:
            callback(entry, params)
    return params, logs


def ablation_recipe(base: Optional[TaskWeights] = None) -> List[Tuple[str, TaskWeights]]:
    """All auxiliary tasks, then drop symm-KL, aux-trans, LM and CTC in turn."""
    base = base or TaskWeights.full()
    steps = [
        ("all", base),
        ("-symm_kl", replace(base, symm_kl=0.0)),
        ("-aux_trans", replace(base, symm_kl=0.0, aux_trans=0.0)),
        ("-lm", replace(base, symm_kl=0.0, aux_trans=0.0, lm=0.0)),
        ("-ctc", replace(base, symm_kl=0.0, aux_trans=0.0, lm=0.0, ctc=0.0)),
    ]
    return steps
