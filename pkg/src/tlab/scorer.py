"""Reference transducer model: encoder, stateful decoder, joint network and heads.

Everything is double precision numpy with row-vector conventions (``x @ W``).
Blank is index 0, labels are 1..V and the decoder's start-of-sequence symbol
uses embedding row 0 (blank is never fed to the decoder, so the row is free).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tlab.errors import ConfigError, ContractError, NumericInputError

BLANK = 0
START = -1

MAGIC = b"TLAB"
FORMAT_VERSION = 1

_LAYER_KINDS = ("linear", "tanh_rnn")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dim: int

    def __str__(self) -> str:
        return f"{self.kind}({self.dim})"


def parse_layers(text: str) -> Tuple[LayerSpec, ...]:
    """Parse ``"tanh_rnn(16),linear(4)"`` (or ``tanh_rnn:16``) into layer specs."""
    layers = []
    for chunk in text.replace(" ", "").split(","):
        if not chunk:
            continue
        if "(" in chunk and chunk.endswith(")"):
            kind, dim = chunk[:-1].split("(", 1)
        elif ":" in chunk:
            kind, dim = chunk.split(":", 1)
        else:
            raise ConfigError(f"cannot parse layer spec {chunk!r}")
        try:
            layers.append(LayerSpec(kind, int(dim)))
        except ValueError as exc:
            raise ConfigError(f"bad layer dimension in {chunk!r}") from exc
    return tuple(layers)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    vocab_size: int
    enc_layers: Tuple[LayerSpec, ...] = (LayerSpec("tanh_rnn", 16),)
    dec_embed_dim: int = 8
    dec_hidden_dim: int = 16
    joint_dim: int = 16
    aux_layer_indices: Tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        # normalize lists handed in by callers
        object.__setattr__(self, "enc_layers", tuple(self.enc_layers))
        object.__setattr__(
            self, "aux_layer_indices", tuple(sorted(set(int(i) for i in self.aux_layer_indices)))
        )

    def validate(self) -> "ModelConfig":
        dims = {
            "input_dim": self.input_dim,
            "vocab_size": self.vocab_size,
            "dec_embed_dim": self.dec_embed_dim,
            "dec_hidden_dim": self.dec_hidden_dim,
            "joint_dim": self.joint_dim,
        }
        for name, value in dims.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.enc_layers:
            raise ConfigError("encoder needs at least one layer")
        for spec in self.enc_layers:
            if spec.kind not in _LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            if spec.dim < 1:
                raise ConfigError(f"layer dimension must be positive: {spec}")
        for idx in self.aux_layer_indices:
            if not 1 <= idx <= len(self.enc_layers):
                raise ConfigError(
                    f"aux layer index {idx} outside 1..{len(self.enc_layers)}"
                )
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        return self

    @property
    def num_outputs(self) -> int:
        return self.vocab_size + 1

    @property
    def enc_out_dim(self) -> int:
        return self.enc_layers[-1].dim

    def layer_dim(self, index: int) -> int:
        """Output width of 1-based encoder layer ``index``."""
        return self.enc_layers[index - 1].dim

    def to_text(self) -> str:
        lines = [
            f"input_dim = {self.input_dim}",
            f"vocab_size = {self.vocab_size}",
            "enc_layers = " + ",".join(str(s) for s in self.enc_layers),
            f"dec_embed_dim = {self.dec_embed_dim}",
            f"dec_hidden_dim = {self.dec_hidden_dim}",
            f"joint_dim = {self.joint_dim}",
            "aux_layer_indices = " + ",".join(str(i) for i in self.aux_layer_indices),
            f"seed = {self.seed}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values: Dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ModelConfig":
        known = {
            "input_dim", "vocab_size", "enc_layers", "dec_embed_dim",
            "dec_hidden_dim", "joint_dim", "aux_layer_indices", "seed",
        }
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key in ("input_dim", "vocab_size", "dec_embed_dim", "dec_hidden_dim", "joint_dim", "seed"):
                if key in values:
                    kwargs[key] = int(values[key])
            if "enc_layers" in values:
                kwargs["enc_layers"] = parse_layers(values["enc_layers"])
            if "aux_layer_indices" in values:
                raw = values["aux_layer_indices"].replace(" ", "")
                kwargs["aux_layer_indices"] = tuple(int(v) for v in raw.split(",") if v)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("input_dim", "vocab_size"):
            if key not in kwargs:
                raise ConfigError(f"missing model key {key!r}")
        return cls(**kwargs).validate()


def tensor_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map for every trainable tensor."""
    V1 = config.num_outputs
    E, H, J = config.dec_embed_dim, config.dec_hidden_dim, config.joint_dim
    shapes: Dict[str, Tuple[int, ...]] = {}
    prev = config.input_dim
    for i, spec in enumerate(config.enc_layers, start=1):
        shapes[f"enc{i}.W"] = (prev, spec.dim)
        if spec.kind == "tanh_rnn":
            shapes[f"enc{i}.U"] = (spec.dim, spec.dim)
        shapes[f"enc{i}.b"] = (spec.dim,)
        prev = spec.dim
    shapes["dec.embed"] = (V1, E)
    shapes["dec.Wx"] = (E, H)
    shapes["dec.Wh"] = (H, H)
    shapes["dec.b"] = (H,)
    shapes["joint.W_enc"] = (config.enc_out_dim, J)
    shapes["joint.W_dec"] = (H, J)
    shapes["joint.b"] = (J,)
    shapes["joint.W_out"] = (J, V1)
    shapes["joint.b_out"] = (V1,)
    shapes["ctc.W"] = (config.enc_out_dim, V1)
    shapes["ctc.b"] = (V1,)
    shapes["lm.W"] = (H, V1)
    shapes["lm.b"] = (V1,)
    for l in config.aux_layer_indices:
        shapes[f"aux{l}.W1"] = (config.layer_dim(l), J)
        shapes[f"aux{l}.b1"] = (J,)
        shapes[f"aux{l}.W2"] = (J, J)
        shapes[f"aux{l}.b2"] = (J,)
    if config.aux_layer_indices:
        shapes["aux_joint.W_out"] = (J, V1)
        shapes["aux_joint.b_out"] = (V1,)
    return shapes


def decoder_param_names(config: ModelConfig) -> List[str]:
    return ["dec.embed", "dec.Wx", "dec.Wh", "dec.b"]


def joint_param_names(config: ModelConfig) -> List[str]:
    return ["joint.W_enc", "joint.W_dec", "joint.b", "joint.W_out", "joint.b_out"]


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """All trainable tensors of the reference model, keyed by name.

    Arrays are marked read-only; training builds new instances with
    :meth:`replace`.
    """

    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        shapes = tensor_shapes(self.config)
        if list(shapes) != list(self.tensors):
            raise ContractError("tensor names do not match the configuration")
        frozen = {}
        for name, shape in shapes.items():
            arr = np.array(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParameters":
        merged = dict(self.tensors)
        merged.update(updates)
        return ModelParameters(self.config, merged)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def equals(self, other: "ModelParameters") -> bool:
        """Bitwise equality of configuration and every tensor."""
        if self.config != other.config:
            return False
        return all(
            np.array_equal(self.tensors[k], other.tensors[k])
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def init_parameters(config: ModelConfig) -> ModelParameters:
    """Uniform fan-in scaled weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif name == "dec.embed":
            # lookup table: each row is used directly, fan-in of one
            tensors[name] = rng.uniform(-1.0, 1.0, size=shape)
        else:
            scale = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-scale, scale, size=shape)
    return ModelParameters(config, tensors)


# ---------------------------------------------------------------------------
# serialization


def _config_bytes(config: ModelConfig) -> bytes:
    return config.to_text().encode("utf-8")


def parameters_to_bytes(params: ModelParameters) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = _config_bytes(params.config)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def parameters_from_bytes(data: bytes) -> ModelParameters:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise ConfigError("truncated parameter file")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ConfigError("not a parameter file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported parameter format version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_text(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims)
        tensors[name] = payload.astype(np.float64)
    return ModelParameters(config, tensors)


def save_parameters(path, params: ModelParameters) -> None:
    with open(path, "wb") as fh:
        fh.write(parameters_to_bytes(params))


def load_parameters(path) -> ModelParameters:
    with open(path, "rb") as fh:
        return parameters_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# forward pieces


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-softmax along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericInputError("log_softmax received non-finite logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _log_softmax_backward(logp: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad - np.exp(logp) * grad.sum(axis=-1, keepdims=True)


@dataclass
class EncoderOutput:
    main: np.ndarray
    aux: Dict[int, np.ndarray]
    # per-layer outputs, index 0 is the input
    layers: List[np.ndarray] = field(default_factory=list, repr=False)


def encode(params: ModelParameters, features: np.ndarray) -> EncoderOutput:
    """Run the encoder stack; aux taps are the post-activation layer outputs."""
    cfg = params.config
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ContractError(f"features must be T x {cfg.input_dim}, got {x.shape}")
    if x.shape[0] < 1:
        raise ContractError("need at least one frame")
    if not np.all(np.isfinite(x)):
        raise NumericInputError("features contain non-finite values")
    outputs = [x]
    h = x
    for i, spec in enumerate(cfg.enc_layers, start=1):
        W, b = params[f"enc{i}.W"], params[f"enc{i}.b"]
        if spec.kind == "linear":
            h = h @ W + b
        else:
            U = params[f"enc{i}.U"]
            proj = h @ W + b
            out = np.empty((h.shape[0], spec.dim))
            prev = np.zeros(spec.dim)
            for t in range(h.shape[0]):
                prev = np.tanh(proj[t] + prev @ U)
                out[t] = prev
            h = out
        outputs.append(h)
    aux = {l: outputs[l] for l in cfg.aux_layer_indices}
    return EncoderOutput(main=h, aux=aux, layers=outputs)


@dataclass(eq=False)
class DecoderState:
    """Hidden vector of the decoder recurrence."""

    hidden: np.ndarray

    def copy(self) -> "DecoderState":
        return DecoderState(self.hidden.copy())

    def close_to(self, other: "DecoderState", tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.hidden, other.hidden, rtol=0.0, atol=tol))


def zero_state(params: ModelParameters) -> DecoderState:
    return DecoderState(np.zeros(params.config.dec_hidden_dim))


def _embed_rows(params: ModelParameters, labels: Sequence[int]) -> np.ndarray:
    V = params.config.vocab_size
    rows = []
    for label in labels:
        if label == START:
            rows.append(0)
        elif isinstance(label, (int, np.integer)) and 1 <= label <= V:
            rows.append(int(label))
        else:
            raise ContractError(f"decoder input must be START or a label in 1..{V}, got {label!r}")
    return params["dec.embed"][rows]


def decode_step(
    params: ModelParameters, prev_label: int, state: DecoderState
) -> Tuple[np.ndarray, DecoderState]:
    """Consume one symbol; returns (decoder output, successor state)."""
    e = _embed_rows(params, [prev_label])[0]
    h = np.tanh(e @ params["dec.Wx"] + state.hidden @ params["dec.Wh"] + params["dec.b"])
    return h, DecoderState(h)


def batch_decode_step(
    params: ModelParameters, labels: Sequence[int], states: Sequence[DecoderState]
) -> Tuple[List[np.ndarray], List[DecoderState]]:
    if len(labels) != len(states) or not labels:
        raise ContractError("labels and states must be non-empty and of equal length")
    E = _embed_rows(params, labels)
    Hprev = np.stack([s.hidden for s in states])
    H = np.tanh(E @ params["dec.Wx"] + Hprev @ params["dec.Wh"] + params["dec.b"])
    return list(H), [DecoderState(h) for h in H]


def joint(params: ModelParameters, enc_t: np.ndarray, dec_u: np.ndarray) -> np.ndarray:
    """Joint logits; broadcasts over leading axes of ``enc_t`` and ``dec_u``."""
    enc_t = np.asarray(enc_t, dtype=np.float64)
    dec_u = np.asarray(dec_u, dtype=np.float64)
    cfg = params.config
    if enc_t.shape[-1] != cfg.enc_out_dim or dec_u.shape[-1] != cfg.dec_hidden_dim:
        raise ContractError(
            f"joint expects enc dim {cfg.enc_out_dim} and dec dim {cfg.dec_hidden_dim}"
        )
    z = np.tanh(enc_t @ params["joint.W_enc"] + dec_u @ params["joint.W_dec"] + params["joint.b"])
    return z @ params["joint.W_out"] + params["joint.b_out"]


def joint_backward(
    params: ModelParameters, enc_t: np.ndarray, dec_u: np.ndarray, grad_logits: np.ndarray
) -> Dict[str, np.ndarray]:
    """Gradients of joint parameters for a single (enc_t, dec_u) pair given dL/dlogits."""
    z = np.tanh(enc_t @ params["joint.W_enc"] + dec_u @ params["joint.W_dec"] + params["joint.b"])
    gz = (grad_logits @ params["joint.W_out"].T) * (1.0 - z * z)
    return {
        "joint.W_enc": np.outer(enc_t, gz),
        "joint.W_dec": np.outer(dec_u, gz),
        "joint.b": gz,
        "joint.W_out": np.outer(z, grad_logits),
        "joint.b_out": np.array(grad_logits, dtype=np.float64),
    }


# ---------------------------------------------------------------------------
# full lattice forward / backward


@dataclass(eq=False)
class LatticeBundle:
    """Everything the losses consume for one utterance, plus the forward cache.

    ``lattice`` is T x (U+1) x (V+1); entry (t, u) is conditioned on the decoder
    state after consuming ``labels[:u]``. ``aux`` holds one such lattice per
    auxiliary encoder layer. ``ctc`` is T x (V+1) and ``lm`` U x (V+1), row u
    predicting ``labels[u]`` from ``labels[:u]``.
    """

    labels: Tuple[int, ...]
    lattice: np.ndarray
    aux: Dict[int, np.ndarray]
    ctc: np.ndarray
    lm: np.ndarray
    enc: EncoderOutput = field(repr=False, default=None)
    dec_out: np.ndarray = field(repr=False, default=None)
    dec_inputs: np.ndarray = field(repr=False, default=None)
    joint_hidden: np.ndarray = field(repr=False, default=None)
    aux_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)


def _check_labels(params: ModelParameters, labels: Iterable[int]) -> Tuple[int, ...]:
    V = params.config.vocab_size
    labels = tuple(int(k) for k in labels)
    for k in labels:
        if not 1 <= k <= V:
            raise ContractError(f"label {k} outside 1..{V}")
    return labels


def decoder_outputs(params: ModelParameters, labels: Sequence[int]) -> np.ndarray:
    """(U+1) x H matrix; row u is the decoder output after consuming labels[:u]."""
    labels = _check_labels(params, labels)
    inputs = [START] + list(labels)
    E = _embed_rows(params, inputs)
    Wx, Wh, b = params["dec.Wx"], params["dec.Wh"], params["dec.b"]
    out = np.empty((len(inputs), params.config.dec_hidden_dim))
    h = np.zeros(params.config.dec_hidden_dim)
    proj = E @ Wx + b
    for j in range(len(inputs)):
        h = np.tanh(proj[j] + h @ Wh)
        out[j] = h
    return out


def compute_lattice(
    params: ModelParameters, features: np.ndarray, labels: Sequence[int]
) -> LatticeBundle:
    cfg = params.config
    labels = _check_labels(params, labels)
    enc = encode(params, features)
    D = decoder_outputs(params, labels)
    dec_proj = D @ params["joint.W_dec"]
    zpre = (enc.main @ params["joint.W_enc"])[:, None, :] + dec_proj[None, :, :] + params["joint.b"]
    z = np.tanh(zpre)
    lattice = log_softmax(z @ params["joint.W_out"] + params["joint.b_out"])

    aux_lattices: Dict[int, np.ndarray] = {}
    aux_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for l in cfg.aux_layer_indices:
        m1 = np.tanh(enc.aux[l] @ params[f"aux{l}.W1"] + params[f"aux{l}.b1"])
        m = m1 @ params[f"aux{l}.W2"] + params[f"aux{l}.b2"]
        a = np.tanh(m[:, None, :] + dec_proj[None, :, :])
        aux_lattices[l] = log_softmax(a @ params["aux_joint.W_out"] + params["aux_joint.b_out"])
        aux_cache[l] = (m1, a)

    ctc = log_softmax(enc.main @ params["ctc.W"] + params["ctc.b"])
    lm = log_softmax(D[: len(labels)] @ params["lm.W"] + params["lm.b"])
    if not len(labels):
        lm = np.zeros((0, cfg.num_outputs))
    return LatticeBundle(
        labels=labels,
        lattice=lattice,
        aux=aux_lattices,
        ctc=ctc,
        lm=lm,
        enc=enc,
        dec_out=D,
        dec_inputs=np.array([0] + list(labels)),
        joint_hidden=z,
        aux_cache=aux_cache,
    )


@dataclass
class Upstream:
    """Loss gradients with respect to the log-probabilities in a bundle.

    Any field left as None contributes nothing.
    """

    lattice: Optional[np.ndarray] = None
    # aux: decoder side held constant; aux_open: gradient also reaches the decoder
    aux: Dict[int, np.ndarray] = field(default_factory=dict)
    aux_open: Dict[int, np.ndarray] = field(default_factory=dict)
    ctc: Optional[np.ndarray] = None
    lm: Optional[np.ndarray] = None


def zero_grads(params: ModelParameters) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


def backprop(
    params: ModelParameters, bundle: LatticeBundle, upstream: Upstream
) -> Dict[str, np.ndarray]:
    """Reverse pass from log-probability gradients to every parameter tensor.

    Gradients in ``upstream.aux`` treat the decoder output and the main
    joint's decoder-side projection as constants, so they only reach encoder
    layers up to the tap, the aux MLPs and the aux output projection.
    ``upstream.aux_open`` flows through the decoder side as well.
    """
    cfg = params.config
    T = bundle.lattice.shape[0]
    grads = zero_grads(params)
    enc = bundle.enc
    D = bundle.dec_out
    g_enc_layers = [np.zeros_like(h) for h in enc.layers]
    g_D = np.zeros_like(D)

    if upstream.lattice is not None:
        g = np.asarray(upstream.lattice, dtype=np.float64)
        if g.shape != bundle.lattice.shape:
            raise ContractError("lattice gradient shape mismatch")
        g_logits = _log_softmax_backward(bundle.lattice, g)
        z = bundle.joint_hidden
        grads["joint.W_out"] += np.einsum("tuj,tuk->jk", z, g_logits)
        grads["joint.b_out"] += g_logits.sum(axis=(0, 1))
        g_zpre = (g_logits @ params["joint.W_out"].T) * (1.0 - z * z)
        g_t = g_zpre.sum(axis=1)
        g_u = g_zpre.sum(axis=0)
        grads["joint.b"] += g_t.sum(axis=0)
        grads["joint.W_enc"] += enc.main.T @ g_t
        grads["joint.W_dec"] += D.T @ g_u
        g_enc_layers[-1] += g_t @ params["joint.W_enc"].T
        g_D += g_u @ params["joint.W_dec"].T

    aux_terms = [(l, g, False) for l, g in upstream.aux.items()]
    aux_terms += [(l, g, True) for l, g in upstream.aux_open.items()]
    for l, g, open_decoder in aux_terms:
        if l not in bundle.aux:
            raise ContractError(f"no aux lattice for layer {l}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != bundle.aux[l].shape:
            raise ContractError("aux lattice gradient shape mismatch")
        m1, a = bundle.aux_cache[l]
        g_logits = _log_softmax_backward(bundle.aux[l], g)
        grads["aux_joint.W_out"] += np.einsum("tuj,tuk->jk", a, g_logits)
        grads["aux_joint.b_out"] += g_logits.sum(axis=(0, 1))
        g_apre = (g_logits @ params["aux_joint.W_out"].T) * (1.0 - a * a)
        if open_decoder:
            g_u = g_apre.sum(axis=0)
            grads["joint.W_dec"] += D.T @ g_u
            g_D += g_u @ params["joint.W_dec"].T
        g_m = g_apre.sum(axis=1)
        grads[f"aux{l}.W2"] += m1.T @ g_m
        grads[f"aux{l}.b2"] += g_m.sum(axis=0)
        g_m1 = (g_m @ params[f"aux{l}.W2"].T) * (1.0 - m1 * m1)
        grads[f"aux{l}.W1"] += enc.layers[l].T @ g_m1
        grads[f"aux{l}.b1"] += g_m1.sum(axis=0)
        g_enc_layers[l] += g_m1 @ params[f"aux{l}.W1"].T

    if upstream.ctc is not None:
        g = np.asarray(upstream.ctc, dtype=np.float64)
        if g.shape != bundle.ctc.shape:
            raise ContractError("ctc gradient shape mismatch")
        g_logits = _log_softmax_backward(bundle.ctc, g)
        grads["ctc.W"] += enc.main.T @ g_logits
        grads["ctc.b"] += g_logits.sum(axis=0)
        g_enc_layers[-1] += g_logits @ params["ctc.W"].T

    U = len(bundle.labels)
    if upstream.lm is not None and U:
        g = np.asarray(upstream.lm, dtype=np.float64)
        if g.shape != bundle.lm.shape:
            raise ContractError("lm gradient shape mismatch")
        g_logits = _log_softmax_backward(bundle.lm, g)
        grads["lm.W"] += D[:U].T @ g_logits
        grads["lm.b"] += g_logits.sum(axis=0)
        g_D[:U] += g_logits @ params["lm.W"].T

    _decoder_backward(params, bundle, g_D, grads)
    _encoder_backward(params, enc, g_enc_layers, grads)
    if T != enc.main.shape[0]:
        raise ContractError("bundle is inconsistent")
    return grads


def _decoder_backward(params, bundle, g_D, grads):
    if not np.any(g_D):
        return
    D = bundle.dec_out
    Wx, Wh = params["dec.Wx"], params["dec.Wh"]
    E = params["dec.embed"][bundle.dec_inputs]
    carry = np.zeros(D.shape[1])
    for j in range(D.shape[0] - 1, -1, -1):
        h = D[j]
        h_prev = D[j - 1] if j > 0 else np.zeros_like(h)
        g_pre = (g_D[j] + carry) * (1.0 - h * h)
        grads["dec.Wx"] += np.outer(E[j], g_pre)
        grads["dec.Wh"] += np.outer(h_prev, g_pre)
        grads["dec.b"] += g_pre
        grads["dec.embed"][bundle.dec_inputs[j]] += g_pre @ Wx.T
        carry = g_pre @ Wh.T


def _encoder_backward(params, enc, g_layers, grads):
    cfg = params.config
    for i in range(len(cfg.enc_layers), 0, -1):
        spec = cfg.enc_layers[i - 1]
        g_out = g_layers[i]
        if not np.any(g_out):
            continue
        x = enc.layers[i - 1]
        W = params[f"enc{i}.W"]
        if spec.kind == "linear":
            grads[f"enc{i}.W"] += x.T @ g_out
            grads[f"enc{i}.b"] += g_out.sum(axis=0)
            g_layers[i - 1] += g_out @ W.T
            continue
        U = params[f"enc{i}.U"]
        h = enc.layers[i]
        g_pre = np.empty_like(h)
        carry = np.zeros(h.shape[1])
        for t in range(h.shape[0] - 1, -1, -1):
            g_pre[t] = (g_out[t] + carry) * (1.0 - h[t] * h[t])
            carry = g_pre[t] @ U.T
        grads[f"enc{i}.W"] += x.T @ g_pre
        grads[f"enc{i}.b"] += g_pre.sum(axis=0)
        if h.shape[0] > 1:
            grads[f"enc{i}.U"] += h[:-1].T @ g_pre[1:]
        g_layers[i - 1] += g_pre @ W.T
