import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tlab.errors import ConfigError, ContractError, NumericInputError
from tlab.losses import TASKS, TaskWeights, objective, objective_value
from tlab.oracles import max_relative_error
from tlab.scorer import (
    START,
    LayerSpec,
    ModelConfig,
    Upstream,
    backprop,
    batch_decode_step,
    compute_lattice,
    decode_step,
    encode,
    init_parameters,
    joint,
    load_parameters,
    log_softmax,
    parameters_from_bytes,
    parameters_to_bytes,
    parse_layers,
    save_parameters,
    tensor_shapes,
    zero_state,
)


def _zeroed(params, names=None):
    return params.replace({k: np.zeros_like(v) for k, v in params.tensors.items() if names is None or k in names})


class TestConfig:
    def test_parse_layers_accepts_both_spellings(self):
        assert parse_layers("tanh_rnn(16), linear:4") == (LayerSpec("tanh_rnn", 16), LayerSpec("linear", 4))

    def test_text_round_trip(self, small_config):
        assert ModelConfig.from_text(small_config.to_text()) == small_config

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_mapping({"input_dim": "2", "vocab_size": "2", "colour": "red"})

    @pytest.mark.parametrize("kwargs", [
        {"vocab_size": 0},
        {"aux_layer_indices": (2,)},
        {"joint_dim": 0},
    ])
    def test_invalid_configs(self, kwargs):
        base = dict(input_dim=2, vocab_size=2)
        base.update(kwargs)
        with pytest.raises(ConfigError):
            init_parameters(ModelConfig(**base))


class TestInit:
    def test_deterministic(self):
        cfg = ModelConfig(input_dim=2, vocab_size=3, seed=7)
        assert init_parameters(cfg).equals(init_parameters(cfg))

    def test_seed_changes_parameters(self):
        a = init_parameters(ModelConfig(input_dim=2, vocab_size=3, seed=7))
        b = init_parameters(ModelConfig(input_dim=2, vocab_size=3, seed=8))
        assert not np.array_equal(a.flat(), b.flat())

    def test_linear_layer_shape(self):
        cfg = ModelConfig(input_dim=5, vocab_size=2, enc_layers=(LayerSpec("linear", 4),))
        assert init_parameters(cfg)["enc1.W"].shape == (5, 4)

    def test_ranges_and_biases(self, small_params):
        for name, arr in small_params.tensors.items():
            if name.endswith(("b", "b1", "b2", "b_out")):
                assert not arr.any(), name
            elif name != "dec.embed":
                assert np.abs(arr).max() <= 1.0 / np.sqrt(arr.shape[0]) + 1e-15

    def test_parameters_are_read_only(self, small_params):
        with pytest.raises(ValueError):
            small_params["joint.b"][0] = 1.0

    def test_shapes_match_config(self, small_config, small_params):
        for name, shape in tensor_shapes(small_config).items():
            assert small_params[name].shape == shape


class TestSerialization:
    def test_round_trip_bit_exact(self, small_params, tmp_path):
        path = tmp_path / "p.tlab"
        save_parameters(path, small_params)
        assert load_parameters(path).equals(small_params)
        assert path.read_bytes()[:4] == b"TLAB"

    def test_bad_magic(self, small_params):
        data = bytearray(parameters_to_bytes(small_params))
        data[0:4] = b"NOPE"
        with pytest.raises(ConfigError):
            parameters_from_bytes(bytes(data))

    def test_truncated(self, small_params):
        with pytest.raises(ConfigError):
            parameters_from_bytes(parameters_to_bytes(small_params)[:-3])


class TestEncoder:
    def test_linear_zero(self):
        cfg = ModelConfig(input_dim=3, vocab_size=2, enc_layers=parse_layers("linear(4),linear(2)"))
        p = _zeroed(init_parameters(cfg), {"enc1.b", "enc2.b"})
        out = encode(p, np.zeros((5, 3)))
        assert out.main.shape == (5, 2) and not out.main.any()

    def test_frame_count(self, small_params):
        assert encode(small_params, np.ones((3, 3))).main.shape[0] == 3

    def test_hand_unrolled_rnn(self):
        cfg = ModelConfig(input_dim=1, vocab_size=1, enc_layers=parse_layers("tanh_rnn(1)"))
        p = init_parameters(cfg).replace({
            "enc1.W": np.array([[0.7]]), "enc1.U": np.array([[-0.4]]), "enc1.b": np.array([0.1]),
        })
        x = np.array([[1.0], [-2.0], [0.5]])
        h, expect = 0.0, []
        for xt in x[:, 0]:
            h = np.tanh(0.7 * xt - 0.4 * h + 0.1)
            expect.append(h)
        np.testing.assert_allclose(encode(p, x).main[:, 0], expect, rtol=0, atol=1e-12)

    def test_aux_tap_is_layer_output(self, small_params, rng):
        x = rng.normal(size=(4, 3))
        out = encode(small_params, x)
        np.testing.assert_array_equal(out.aux[1], out.layers[1])

    def test_non_finite_rejected(self, small_params):
        x = np.ones((2, 3))
        x[1, 1] = np.nan
        with pytest.raises(NumericInputError):
            encode(small_params, x)

    def test_wrong_width(self, small_params):
        with pytest.raises(ContractError):
            encode(small_params, np.ones((2, 4)))


class TestDecoder:
    def test_deterministic(self, small_params):
        s = zero_state(small_params)
        a, sa = decode_step(small_params, 2, s)
        b, sb = decode_step(small_params, 2, s)
        np.testing.assert_array_equal(a, b)
        assert sa.close_to(sb, 0.0)

    def test_start_symbol(self, small_params):
        out, _ = decode_step(small_params, START, zero_state(small_params))
        p = small_params
        expect = np.tanh(p["dec.embed"][0] @ p["dec.Wx"] + p["dec.b"])
        np.testing.assert_allclose(out, expect, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("label", [0, 4, -3])
    def test_bad_labels(self, small_params, label):
        with pytest.raises(ContractError):
            decode_step(small_params, label, zero_state(small_params))

    def test_batch_length_mismatch(self, small_params):
        with pytest.raises(ContractError):
            batch_decode_step(small_params, [1, 2], [zero_state(small_params)])

    @given(st.lists(st.sampled_from([START, 1, 2, 3]), min_size=1, max_size=16), st.integers(0, 2**31))
    def test_batch_matches_sequential(self, labels, seed):
        p = init_parameters(ModelConfig(input_dim=2, vocab_size=3, dec_hidden_dim=5, seed=3))
        rng = np.random.default_rng(seed)
        states = [zero_state(p) for _ in labels]
        for s in states:
            s.hidden = rng.uniform(-1, 1, size=5)
        outs, new_states = batch_decode_step(p, labels, states)
        for k, s, o, ns in zip(labels, states, outs, new_states):
            o2, ns2 = decode_step(p, k, s)
            np.testing.assert_allclose(o, o2, rtol=0, atol=1e-12)
            assert ns.close_to(ns2)

    def test_duplicates_equal(self, small_params):
        s = zero_state(small_params)
        outs, _ = batch_decode_step(small_params, [1, 2, 1, 1, 2], [s] * 5)
        np.testing.assert_array_equal(outs[0], outs[2])
        np.testing.assert_array_equal(outs[1], outs[4])


class TestJoint:
    def test_zero_weights(self, small_params):
        p = _zeroed(small_params)
        assert not joint(p, np.ones(3), np.ones(3)).any()

    def test_swap_changes_output(self, small_params, rng):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert not np.allclose(joint(small_params, a, b), joint(small_params, b, a))

    def test_hand_example(self):
        cfg = ModelConfig(input_dim=1, vocab_size=1, enc_layers=parse_layers("linear(1)"),
                          dec_hidden_dim=1, joint_dim=1)
        p = init_parameters(cfg).replace({
            "joint.W_enc": np.array([[0.5]]), "joint.W_dec": np.array([[-1.5]]),
            "joint.b": np.array([0.25]), "joint.W_out": np.array([[2.0, -1.0]]),
            "joint.b_out": np.array([0.1, 0.2]),
        })
        z = np.tanh(0.5 * 0.8 - 1.5 * 0.3 + 0.25)
        np.testing.assert_allclose(joint(p, np.array([0.8]), np.array([0.3])),
                                   [2.0 * z + 0.1, -z + 0.2], rtol=0, atol=1e-12)

    def test_dimension_mismatch(self, small_params):
        with pytest.raises(ContractError):
            joint(small_params, np.ones(2), np.ones(3))


class TestLogSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(log_softmax(np.zeros(2)), np.log([0.5, 0.5]))

    def test_large_values(self):
        out = log_softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out)) and abs(out[0]) < 1e-12 and abs(out[1] + 1000.0) < 1e-9

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
    def test_normalized_and_shift_invariant(self, z, c):
        z = np.array(z)
        out = log_softmax(z)
        assert abs(np.exp(out).sum() - 1.0) < 1e-12
        np.testing.assert_allclose(log_softmax(z + c), out, atol=1e-9)

    def test_non_finite(self):
        with pytest.raises(NumericInputError):
            log_softmax(np.array([0.0, np.inf]))


class TestLattice:
    def test_normalized(self, small_params, rng):
        b = compute_lattice(small_params, rng.normal(size=(4, 3)), [1, 3])
        np.testing.assert_allclose(np.exp(b.lattice).sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(b.aux[1]).sum(-1), 1.0, atol=1e-12)
        assert b.lattice.shape == (4, 3, 4) and b.lm.shape == (2, 4) and b.ctc.shape == (4, 4)

    def test_empty_target(self, small_params, rng):
        assert compute_lattice(small_params, rng.normal(size=(2, 3)), []).lattice.shape == (2, 1, 4)

    def test_manual_entry(self, small_params, rng):
        x = rng.normal(size=(4, 3))
        b = compute_lattice(small_params, x, [2, 1])
        enc = encode(small_params, x).main
        _, s = decode_step(small_params, START, zero_state(small_params))
        dec, _ = decode_step(small_params, 2, s)
        np.testing.assert_allclose(b.lattice[2, 1], log_softmax(joint(small_params, enc[2], dec)),
                                   rtol=0, atol=1e-12)

    def test_rows_depend_only_on_prefix(self, small_params, rng):
        x = rng.normal(size=(3, 3))
        a = compute_lattice(small_params, x, [1, 2, 3]).lattice
        b = compute_lattice(small_params, x, [1, 3, 1]).lattice
        np.testing.assert_array_equal(a[:, :2], b[:, :2])

    def test_invalid_label(self, small_params):
        with pytest.raises(ContractError):
            compute_lattice(small_params, np.ones((2, 3)), [4])


class TestBackprop:
    def test_zero_upstream(self, small_params, rng):
        b = compute_lattice(small_params, rng.normal(size=(3, 3)), [1])
        grads = backprop(small_params, b, Upstream())
        assert all(not g.any() for g in grads.values())

    def test_output_bias_passthrough(self, small_params, rng):
        b = compute_lattice(small_params, rng.normal(size=(3, 3)), [1])
        up = np.zeros_like(b.lattice)
        up[1, 0, 2] = 1.0
        grads = backprop(small_params, b, Upstream(lattice=up))
        # d logp_k / d b_out_j = [j == k] - p_j
        p = np.exp(b.lattice[1, 0])
        expect = -p
        expect[2] += 1.0
        np.testing.assert_allclose(grads["joint.b_out"], expect, atol=1e-12)

    def test_full_model_finite_differences(self):
        cfg = ModelConfig(input_dim=2, vocab_size=3, enc_layers=parse_layers("tanh_rnn(3),tanh_rnn(3)"),
                          dec_embed_dim=2, dec_hidden_dim=3, joint_dim=3, aux_layer_indices=(1,), seed=11)
        p = init_parameters(cfg)
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 2)), [3, 1, 2]
        w = TaskWeights.full()
        _, grads = objective(p, x, y, w)
        # aux_trans alone stops at the decoder; check the combined objective on the rest
        worst = 0.0
        for name, arr in p.tensors.items():
            if name.startswith("dec.") or name == "joint.W_dec":
                continue
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                a, b = arr.copy(), arr.copy()
                a[idx] += 1e-5
                b[idx] -= 1e-5
                num[idx] = (objective_value(p.replace({name: a}), x, y, w)
                            - objective_value(p.replace({name: b}), x, y, w)) / 2e-5
            worst = max(worst, max_relative_error(grads[name], num, floor=1e-7))
        assert worst < 1e-4
