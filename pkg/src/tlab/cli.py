"""Command-line entry point: gen-data, train, decode, bench, verify.

Settings come from an optional ``key = value`` file with ``[section]``
headers, overridden by flags. Seeds fall back to ``TLAB_SEED``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from tlab import bench as benchmod
from tlab.errors import ConfigError, DivergenceError, NumericInputError, TlabError
from tlab.losses import TASKS, TaskWeights
from tlab.scorer import ModelConfig, init_parameters, load_parameters, parse_layers, save_parameters
from tlab.search import BeamConfig, DecoderLM, ModelScorer, STRATEGIES, estimate_auto_nstep
from tlab.trainer import (
    LOG_COLUMNS,
    SyntheticTask,
    TrainConfig,
    gen_synthetic,
    read_dataset,
    train,
    write_dataset,
)

log = logging.getLogger("tlab")

DECODE_COLUMNS = [
    "utt", "rank", "strategy", "params", "score", "joint_calls", "decoder_calls",
    "wall_time", "hyp", "ref", "errors",
]
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


def _int_or_auto(text: str):
    return text if str(text).strip() == "auto" else int(text)


# section -> key -> (parser, default)
OPTIONS: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "run": {"seed": (int, None), "jobs": (int, 1), "log_level": (str, "warning")},
    "paths": {
        "data": (str, None), "out": (str, None), "params": (str, None),
        "log": (str, None), "lm": (str, None), "expansions": (str, None),
    },
    "data": {
        "task": (str, None), "vocab": (int, 4), "count": (int, 500),
        "min_len": (int, 2), "max_len": (int, 5),
        "min_frames": (int, None), "max_frames": (int, None), "noise": (float, 0.0),
    },
    "model": {
        "enc_layers": (str, "tanh_rnn(16)"), "dec_embed": (int, 8), "dec_hidden": (int, 16),
        "joint_dim": (int, 16), "aux_layers": (str, ""),
    },
    "train": {
        "aux": (str, "none"), "epochs": (int, 30), "lr": (float, 1e-3), "batch_size": (int, 8),
        "optimizer": (str, "adam"), "clip": (float, 5.0), "eval_interval": (int, 1),
        "smoothing": (float, 0.1),
    },
    "beam": {
        "strategy": (str, "default"), "beam": (int, 5), "nbest": (int, 1), "u_max": (int, 50),
        "max_sym_exp": (int, 2), "nstep": (int, 1), "auto_nstep": (_int_or_auto, 1),
        "prefix_alpha": (int, 2), "lm_weight": (float, 0.0),
    },
    "bench": {
        "strategies": (str, "alsd,tsd,nsc"), "grid": (str, ""), "reps": (int, 1),
        "frame_duration": (float, 0.01),
    },
    "verify": {"suite": (str, "all"), "n": (int, None)},
}
KEY_SECTION = {k: sec for sec, keys in OPTIONS.items() for k in keys}
BEAM_KEYS = ("beam", "nbest", "u_max", "max_sym_exp", "nstep", "auto_nstep", "prefix_alpha")


def read_config_file(path: str) -> Dict[str, str]:
    """Flat key -> raw value map from a sectioned ``key = value`` file."""
    values: Dict[str, str] = {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in OPTIONS:
                    raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            if section is None:
                raise ConfigError(f"{path}:{lineno}: key {key!r} outside any section")
            if key not in OPTIONS[section]:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            values[key] = value.strip()
    return values


class Settings:
    """Resolved option values: flag, then config file, then built-in default."""

    def __init__(self, args: argparse.Namespace):
        self.flags = {k: v for k, v in vars(args).items() if k in KEY_SECTION and v is not None}
        self.file = read_config_file(args.config) if getattr(args, "config", None) else {}
        self.values: Dict[str, Any] = {}
        for key, sec in KEY_SECTION.items():
            parser, default = OPTIONS[sec][key]
            if key in self.flags:
                self.values[key] = self.flags[key]
            elif key in self.file:
                try:
                    self.values[key] = parser(self.file[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {self.file[key]!r}") from exc
            else:
                self.values[key] = default
        if self.values["seed"] is None:
            env = os.environ.get("TLAB_SEED")
            try:
                self.values["seed"] = int(env) if env not in (None, "") else 0
            except ValueError as exc:
                raise ConfigError(f"TLAB_SEED must be an integer, got {env!r}") from exc

    def __getitem__(self, key: str):
        return self.values[key]

    def given(self, key: str) -> bool:
        return key in self.flags or key in self.file

    def require(self, key: str) -> Any:
        value = self.values[key]
        if value is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
        return value


# ---------------------------------------------------------------------------
# argument parsing


def _add(parser: argparse.ArgumentParser, key: str, help: str = "") -> None:
    sec = KEY_SECTION[key]
    kind, default = OPTIONS[sec][key]
    shown = "" if default in (None, "") else f" (default {default})"
    parser.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None, help=help + shown)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tlab", description="Transducer training and decoding lab.")
    p.add_argument("--config", help="key = value file with [section] headers")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp):
        sp.add_argument("--config", default=argparse.SUPPRESS, help="key = value file with [section] headers")
        _add(sp, "seed", "global seed; TLAB_SEED is the fallback")
        _add(sp, "log_level")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    _add(g, "task", "copy or repeat2")
    for key in ("vocab", "count", "min_len", "max_len", "min_frames", "max_frames", "noise"):
        _add(g, key)
    _add(g, "out", "dataset file to write")

    t = sub.add_parser("train", help="train a model on a dataset file")
    common(t)
    for key in ("data", "out", "log"):
        _add(t, key)
    _add(t, "aux", "auxiliary weights: none, full, or task=weight list such as ctc=0.5,lm=0.4")
    for key in ("epochs", "lr", "batch_size", "optimizer", "clip", "eval_interval", "smoothing"):
        _add(t, key)
    for key in OPTIONS["model"]:
        _add(t, key)

    d = sub.add_parser("decode", help="decode a dataset and write hypotheses")
    common(d)
    for key in ("params", "data", "out"):
        _add(d, key)
    _add(d, "strategy", "one of " + ", ".join(STRATEGIES))
    for key in BEAM_KEYS:
        _add(d, key)
    _add(d, "lm", "parameter file whose decoder and LM head serve as the fusion LM")
    _add(d, "lm_weight")
    _add(d, "jobs", "worker processes")

    b = sub.add_parser("bench", help="CER/RTF sweep and expansion statistics")
    common(b)
    for key in ("params", "data", "out", "expansions"):
        _add(b, key)
    _add(b, "strategies", "comma list from alsd, tsd, nsc")
    _add(b, "grid", "comma list overriding every strategy's default grid")
    _add(b, "beam")
    _add(b, "reps", "timed repetitions per grid point")
    _add(b, "frame_duration", "seconds per frame")
    _add(b, "jobs", "ignored: timed runs are serial")

    v = sub.add_parser("verify", help="run correctness suites")
    common(v)
    _add(v, "suite", "suite name or all")
    _add(v, "n", "instance count override")
    return p


# ---------------------------------------------------------------------------
# helpers


def parse_aux(text: str) -> TaskWeights:
    text = (text or "none").strip()
    if text == "none":
        return TaskWeights.vanilla()
    if text == "full":
        return TaskWeights.full()
    weights: Dict[str, float] = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        name = name.strip()
        if not sep or name not in TASKS:
            raise ConfigError(f"bad aux entry {part!r}; expected task=weight with task in {TASKS}")
        try:
            weights[name] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad weight in {part!r}") from exc
    return TaskWeights(**weights)


def model_config(s: Settings, input_dim: int, vocab: int, weights: TaskWeights) -> ModelConfig:
    aux = tuple(int(v) for v in s["aux_layers"].replace(" ", "").split(",") if v)
    if not aux and (weights.active("aux_trans") or weights.active("symm_kl")):
        aux = (1,)
    try:
        layers = parse_layers(s["enc_layers"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ModelConfig(
        input_dim=input_dim, vocab_size=vocab, enc_layers=layers,
        dec_embed_dim=s["dec_embed"], dec_hidden_dim=s["dec_hidden"], joint_dim=s["joint_dim"],
        aux_layer_indices=aux, seed=s["seed"],
    ).validate()


def beam_config(s: Settings, strategy: Optional[str] = None) -> BeamConfig:
    auto = s["auto_nstep"]
    return BeamConfig(
        strategy=strategy or s["strategy"], beam_size=s["beam"], nbest=s["nbest"], u_max=s["u_max"],
        max_sym_exp=s["max_sym_exp"], nstep=s["nstep"], auto_nstep=1 if auto == "auto" else auto,
        prefix_alpha=s["prefix_alpha"], lm_weight=s["lm_weight"], lm_enabled=s["lm"] is not None,
    ).validate()


def _load_dataset(s: Settings):
    path = s.require("data")
    if not os.path.exists(path):
        raise ConfigError(f"dataset file not found: {path}")
    return read_dataset(path)


def _load_params(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"parameter file not found: {path}")
    return load_parameters(path)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(s: Settings) -> int:
    frames = None
    if s["min_frames"] is not None or s["max_frames"] is not None:
        frames = (s["min_frames"] or 0, s["max_frames"] if s["max_frames"] is not None else 10**9)
    task = SyntheticTask(
        kind=s.require("task"), vocab_size=s["vocab"], u_range=(s["min_len"], s["max_len"]),
        t_range=frames, noise_std=s["noise"], count=s["count"], seed=s["seed"],
    )
    data = gen_synthetic(task)
    out = s["out"] or f"{task.kind}.txt"
    write_dataset(out, data)
    print(f"wrote {len(data)} utterances to {out}")
    return EXIT_OK


def cmd_train(s: Settings) -> int:
    data = _load_dataset(s)
    weights = parse_aux(s["aux"])
    cfg = TrainConfig(
        weights=weights, optimizer=s["optimizer"], lr=s["lr"], batch_size=s["batch_size"],
        epochs=s["epochs"], clip_norm=s["clip"], eval_interval=s["eval_interval"],
        seed=s["seed"], smoothing=s["smoothing"],
    ).validate()
    if cfg.lr <= 0:
        raise ConfigError("learning rate must be positive")
    params = init_parameters(model_config(s, data.input_dim, data.vocab_size, weights))
    out = s["out"] or "model.tlab"
    log_path = s["log"] or os.path.splitext(out)[0] + ".csv"
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

        def on_epoch(entry, _params):
            writer.writerow([entry.epoch] + [_fmt(v) for v in entry.row()[1:]])
            fh.flush()

        params, logs = train(params, data, cfg, callback=on_epoch)
    save_parameters(out, params)
    last = logs[-1] if logs else None
    if last is not None:
        print(f"epoch {last.epoch}: total {last.losses.l_total:.4f}, greedy accuracy {last.greedy_seq_acc:.3f}")
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def cmd_decode(s: Settings) -> int:
    data = _load_dataset(s)
    params = _load_params(s.require("params"))
    if params.config.input_dim != data.input_dim:
        raise ConfigError("dataset feature width does not match the model")
    strategy = s["strategy"]
    if strategy == "greedy" and any(s.given(k) for k in BEAM_KEYS + ("lm", "lm_weight")):
        log.warning("greedy decoding ignores beam and LM options")
    if s.given("lm_weight") and s["lm"] is None:
        raise ConfigError("--lm-weight needs --lm")
    cfg = beam_config(s)
    scorer = ModelScorer(params)
    if s["auto_nstep"] == "auto":
        n, hist = estimate_auto_nstep(scorer, [u.features for u in data.utterances], cfg)
        log.info("auto N_step estimate %d from histogram %s", n, hist)
        cfg = replace(cfg, auto_nstep=n)
    lm = DecoderLM(_load_params(s["lm"])) if s["lm"] is not None else None
    reports = benchmod.decode_all(scorer, [u.features for u in data.utterances], cfg, lm, jobs=s["jobs"])
    out = s["out"] or "hyps.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECODE_COLUMNS)
        params_text = cfg.param_string()
        for i, (utt, rep) in enumerate(zip(data.utterances, reports)):
            for rank, (labels, score) in enumerate(rep.nbest, 1):
                errors = benchmod.edit_distance(utt.labels, labels)[0]
                w.writerow([
                    i, rank, cfg.strategy, params_text, _fmt(score), rep.joint_calls, rep.decoder_calls,
                    f"{rep.wall_time:.6f}", " ".join(map(str, labels)), " ".join(map(str, utt.labels)), errors,
                ])
    cer = benchmod.corpus_error_rate((u.labels, r.best) for u, r in zip(data.utterances, reports))
    print(f"{' '.join(filter(None, (cfg.strategy, cfg.param_string())))}: CER {100 * cer:.2f}% over {len(reports)} utterances; wrote {out}")
    return EXIT_OK


def cmd_bench(s: Settings) -> int:
    data = _load_dataset(s)
    params = _load_params(s.require("params"))
    scorer = ModelScorer(params)
    if s["jobs"] != 1:
        log.warning("timed runs are serial; ignoring --jobs")
    rows = []
    strategies = [x.strip() for x in s["strategies"].split(",") if x.strip()]
    grid = tuple(int(v) for v in s["grid"].split(",") if v.strip())
    for strategy in strategies:
        spec = benchmod.SweepSpec.default(
            strategy, beam_size=s["beam"], repetitions=s["reps"], frame_duration_s=s["frame_duration"]
        )
        if grid:
            spec = replace(spec, values=grid)
        rows += benchmod.sweep(scorer, data, spec)
    out = s["out"] or "sweep.csv"
    benchmod.write_sweep_csv(out, rows)
    reports = [
        benchmod.decode(scorer, u.features, BeamConfig(strategy="default", beam_size=s["beam"]))
        for u in data.utterances
    ]
    table = benchmod.expansion_stats(reports)
    exp_path = s["expansions"] or os.path.splitext(out)[0] + "_expansions.csv"
    benchmod.write_expansion_table(exp_path, table)
    for row in rows:
        print(
            f"{row['strategy']} {row['param_name']}={row['param_value']}: CER {100 * row['cer']:.2f}% "
            f"RTF {row['rtf_mean']:.4f} joint calls {row['joint_calls']}"
        )
    print("expansions " + " / ".join(f"{n}: {pct:.2f}%" for n, pct in table))
    print(f"wrote {out} and {exp_path}")
    return EXIT_OK


def cmd_verify(s: Settings) -> int:
    from tlab.verify import SUITES

    name = s["suite"]
    if name != "all" and name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from all, {', '.join(SUITES)}")
    failed = False
    for suite, fn in SUITES.items():
        if name not in ("all", suite):
            continue
        result = fn(n=s["n"]) if s["n"] is not None else fn()
        print(result.line())
        failed |= not result.passed
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("tlab: error: a command is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        settings = Settings(args)
        logging.basicConfig(
            level=getattr(logging, str(settings["log_level"]).upper(), logging.WARNING),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](settings)
    except (DivergenceError, NumericInputError) as exc:
        print(f"tlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, TlabError, ValueError, OSError) as exc:
        print(f"tlab: error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError) and "missing required option" in str(exc):
            parser._subparsers._group_actions[0].choices[args.command].print_usage(sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
