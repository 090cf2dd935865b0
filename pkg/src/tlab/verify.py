"""On-demand correctness suites: losses against enumeration, gradients against
finite differences, and searches against exhaustive marginals."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy.special import logsumexp

from tlab.losses import (
    TASKS,
    TaskWeights,
    backward_vars,
    brute_force_loss,
    ctc_brute_force,
    ctc_loss,
    forward_vars,
    objective,
    objective_value,
    transducer_loss,
)
from tlab.oracles import (
    exhaustive_argmax,
    random_ctc_instance,
    random_instance,
    sequence_logprob,
    tiny_search_instance,
)
from tlab.scorer import (
    ModelConfig,
    decoder_param_names,
    init_parameters,
    parse_layers,
)
from tlab.search import BeamConfig, decode

SEARCH_STRATEGIES = ("default", "alsd", "tsd", "nsc")


@dataclass
class SuiteResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0
    extra: Dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - start
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def loss_oracle(n: int = 200, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Forward-backward and CTC losses against alignment/path enumeration."""
    rng = np.random.default_rng(seed)
    worst_trans = worst_ctc = 0.0
    for _ in range(n):
        lat, y = random_instance(rng, max_T=5, max_U=4, max_V=4)
        fast, _ = transducer_loss(lat, y)
        worst_trans = max(worst_trans, abs(fast - brute_force_loss(lat, y)))
        frames, y2 = random_ctc_instance(rng, max_T=5, max_U=4, max_V=4)
        fast, _ = ctc_loss(frames, y2)
        slow = ctc_brute_force(frames, y2)
        if math.isinf(fast) or math.isinf(slow):
            dev = 0.0 if fast == slow else math.inf
        else:
            dev = abs(fast - slow)
        worst_ctc = max(worst_ctc, dev)
    worst = max(worst_trans, worst_ctc)
    return SuiteResult(
        "loss-oracle", worst, tol, worst < tol,
        f"max deviation transducer {worst_trans:.3e}, ctc {worst_ctc:.3e} over {n} instances",
    )


@_timed
def diagonal_cut(n: int = 100, seed: int = 1, tol: float = 1e-9) -> SuiteResult:
    """Every anti-diagonal of alpha + beta carries the full sequence probability."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        lat, y = random_instance(rng, max_T=6, max_U=5, max_V=4)
        alpha, log_p = forward_vars(lat, y)
        beta = backward_vars(lat, y)
        T, U1 = alpha.shape
        s = alpha + beta
        for d in range(T + U1 - 1):
            cells = [s[t, d - t] for t in range(T) if 0 <= d - t < U1]
            worst = max(worst, abs(float(logsumexp(cells)) - log_p))
    return SuiteResult("diagonal-cut", worst, tol, worst < tol, f"max deviation {worst:.3e} over {n} instances")


def grad_model_config(seed: int) -> ModelConfig:
    """Small model that still has every tensor family, including two aux taps."""
    return ModelConfig(
        input_dim=3,
        vocab_size=3,
        enc_layers=parse_layers("tanh_rnn(4),linear(3),tanh_rnn(3)"),
        dec_embed_dim=2,
        dec_hidden_dim=3,
        joint_dim=3,
        aux_layer_indices=(1, 2),
        seed=seed,
    ).validate()


def _grad_instance(i: int):
    rng = np.random.default_rng([7, i])
    params = init_parameters(grad_model_config(i))
    T = int(rng.integers(3, 6))
    U = int(rng.integers(1, 3))
    x = rng.normal(size=(T, 3))
    y = [int(k) for k in rng.integers(1, 4, size=U)]
    return params, x, y


def stopped_params(config: ModelConfig) -> List[str]:
    """Tensors the auxiliary transducer loss must not update."""
    return decoder_param_names(config) + ["joint.W_dec"]


@_timed
def grad_check(n: int = 20, eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-7) -> SuiteResult:
    """Full-model analytic gradients of each loss against central differences.

    The auxiliary transducer loss is compared on every tensor it is allowed
    to update; its stopped tensors are covered by ``stop_gradient``.
    """
    worst = 0.0
    per_task = {t: 0.0 for t in TASKS}
    for i in range(n):
        params, x, y = _grad_instance(i)
        skip_aux = set(stopped_params(params.config))
        for task in TASKS:
            w = TaskWeights(**{t: (1.0 if t == task else 0.0) for t in TASKS})
            _, grads = objective(params, x, y, w)
            for name, arr in params.tensors.items():
                if task == "aux_trans" and name in skip_aux:
                    continue
                for idx in np.ndindex(arr.shape):
                    plus = arr.copy()
                    plus[idx] += eps
                    minus = arr.copy()
                    minus[idx] -= eps
                    num = (objective_value(params.replace({name: plus}), x, y, w)
                           - objective_value(params.replace({name: minus}), x, y, w)) / (2 * eps)
                    an = float(grads[name][idx])
                    if max(abs(an), abs(num)) > floor:
                        rel = abs(an - num) / max(abs(an), abs(num))
                        per_task[task] = max(per_task[task], rel)
        worst = max(per_task.values())
    detail = "max relative error " + ", ".join(f"{t} {v:.2e}" for t, v in per_task.items())
    return SuiteResult("grad", worst, tol, worst < tol, detail, extra={"per_task": per_task})


@_timed
def stop_gradient(n: int = 5) -> SuiteResult:
    """Auxiliary transducer gradients on decoder and main joint tensors are exactly zero."""
    worst = 0.0
    for i in range(n):
        params, x, y = _grad_instance(i)
        _, grads = objective(params, x, y, TaskWeights(trans=0.0, aux_trans=1.0))
        names = decoder_param_names(params.config) + [
            k for k in params.tensors if k.startswith("joint.")
        ]
        for name in names:
            worst = max(worst, float(np.max(np.abs(grads[name]))))
    return SuiteResult("stop-grad", worst, 0.0, worst == 0.0, f"max |grad| on stopped tensors {worst:.3e}")


def _search_cfg(strategy: str, T: int, beam: int = 8) -> BeamConfig:
    # generous expansion budgets for tiny problems
    return BeamConfig(
        strategy=strategy, beam_size=beam, nbest=beam, u_max=max(T - 1, 1) if strategy == "alsd" else 50,
        max_sym_exp=4, nstep=3, prefix_alpha=4,
    )


def oracle_max_len(V: int, max_set: int = 40) -> int:
    """Longest label length whose full sequence set stays within ``max_set``."""
    L, size = 0, 1
    while size + V ** (L + 1) <= max_set:
        L += 1
        size += V ** L
    return L


@_timed
def search_oracle(n: int = 100, max_T: int = 4, max_V: int = 3, need: float = 0.95) -> SuiteResult:
    """Share of tiny instances where each strategy returns the exhaustive argmax."""
    hits = {s: 0 for s in SEARCH_STRATEGIES}
    for seed in range(n):
        scorer, T = tiny_search_instance(seed, max_T=max_T, max_V=max_V)
        best, _, _ = exhaustive_argmax(scorer, None, max_len=oracle_max_len(scorer.vocab_size))
        for strategy in SEARCH_STRATEGIES:
            if decode(scorer, None, _search_cfg(strategy, T)).best == best:
                hits[strategy] += 1
    worst = min(hits.values()) / n
    detail = "agreement " + ", ".join(f"{s} {100.0 * h / n:.0f}%" for s, h in hits.items())
    return SuiteResult("search-oracle", worst, need, worst >= need, detail, extra={"hits": hits})


@_timed
def upper_bound(n: int = 100, max_T: int = 4, max_V: int = 3, tol: float = 1e-9) -> SuiteResult:
    """No complete hypothesis scores above its forward-algorithm marginal."""
    worst = -math.inf
    checked = 0
    for seed in range(n):
        scorer, T = tiny_search_instance(seed, max_T=max_T, max_V=max_V)
        for strategy in ("greedy",) + SEARCH_STRATEGIES:
            report = decode(scorer, None, _search_cfg(strategy, T))
            if not report.complete:
                continue
            for labels, score in report.nbest:
                worst = max(worst, score - sequence_logprob(scorer, None, labels))
                checked += 1
    return SuiteResult(
        "upper-bound", worst, tol, worst <= tol,
        f"max (score - marginal) {worst:.3e} over {checked} hypotheses",
    )


def call_bound_violations(scorer, T: int, cfg: BeamConfig) -> Tuple[int, int]:
    """(joint calls, bound) for one decode."""
    report = decode(scorer, None, cfg)
    s = cfg.strategy
    if s == "greedy":
        bound = T + len(report.best)
        return report.joint_calls, bound
    if s == "alsd":
        bound = (T + cfg.u_max) * cfg.beam_size
    elif s == "tsd":
        bound = T * cfg.max_sym_exp * cfg.beam_size
    elif s == "nsc":
        bound = T * (cfg.nstep + 1) * cfg.beam_size
    else:
        return report.joint_calls, -1
    return report.joint_calls, bound


@_timed
def call_bounds(n: int = 100, max_T: int = 6, max_V: int = 3) -> SuiteResult:
    """Joint-call counters against each strategy's bound (greedy must hit it exactly)."""
    violations = 0
    checked = 0
    for seed in range(n):
        scorer, T = tiny_search_instance(seed, max_T=max_T, max_V=max_V)
        grid = [BeamConfig(strategy="greedy")]
        for beam in (1, 3, 5):
            grid += [BeamConfig(strategy="alsd", beam_size=beam, u_max=u) for u in (2, 5)]
            grid += [BeamConfig(strategy="tsd", beam_size=beam, max_sym_exp=m) for m in (1, 2, 3)]
            grid += [BeamConfig(strategy="nsc", beam_size=beam, nstep=k, prefix_alpha=2) for k in (1, 2, 3)]
        for cfg in grid:
            calls, bound = call_bound_violations(scorer, T, cfg)
            ok = calls == bound if cfg.strategy == "greedy" else calls <= bound
            violations += not ok
            checked += 1
    return SuiteResult("call-bounds", violations, 0, violations == 0, f"{violations} violations in {checked} decodes")


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "loss-oracle": loss_oracle,
    "diagonal-cut": diagonal_cut,
    "grad": grad_check,
    "stop-grad": stop_gradient,
    "search-oracle": search_oracle,
    "upper-bound": upper_bound,
    "call-bounds": call_bounds,
}
