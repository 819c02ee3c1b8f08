from dataclasses import replace

import numpy as np
import pytest

from promptlab import autodiff as ad
from promptlab.model import ContextLimitError, ModelConfig, build_model, preset_config
from promptlab.peft import (DETACHABLE, METHODS, AdapterSpec, LoraLayer, ResidualMLP, attach,
                            compose_spt4asr, count_params, detach, dpt_inject, lora_forward,
                            respt_reparam, symbolic_account)
from promptlab.trainer import OptimizerConfig, batch_loss, make_batch, train_run


def test_small_preset_counts():
    small = preset_config("small")
    spec = AdapterSpec(position="Entire", n_enc=128, n_dec=128)
    assert symbolic_account(small, replace(spec, method="VanillaSPT")).total == 196_608
    respt = symbolic_account(small, replace(spec, method="ResPT", respt_bottleneck=384))
    assert respt.components["respt_mlp"] == 590_976 and respt.total == 787_584
    lpt = symbolic_account(small, replace(spec, method="LPT", lpt_hidden=512))
    assert lpt.components["lpt_encoder"] == 787_712 and lpt.total == 984_320
    assert symbolic_account(small, replace(spec, method="DPT", n_deep=64)).total == 1_376_256


def test_medium_whole_model_prompt_delta():
    medium = preset_config("medium")
    spec = AdapterSpec(position="Entire", n_enc=128, n_dec=128)
    whole = symbolic_account(medium, replace(spec, method="WholeModelSPT")).total
    fft = symbolic_account(medium, replace(spec, method="FFT")).total
    assert whole - fft == 262_144


@pytest.mark.parametrize("method", METHODS)
def test_live_count_matches_symbolic(method, toy):
    a = attach(toy, AdapterSpec(method=method))
    live, symbolic = count_params(a), symbolic_account(toy.config, a.spec)
    assert live.components == symbolic.components
    assert live.frozen == symbolic.frozen
    assert live.total + live.frozen == sum(p.data.size for p in a.parameters())


def test_toy_deep_prompt_count(toy):
    a = attach(toy, AdapterSpec(method="DPT", n_deep=8))
    assert count_params(a).components["deep"] == 4 * 8 * 64


@pytest.mark.parametrize("method", METHODS)
def test_partition(method, toy):
    a = attach(toy, AdapterSpec(method=method))
    base_trainable = {p.trainable for p in toy.parameters()}
    assert base_trainable == {method in ("FFT", "WholeModelSPT")}
    assert all(p.trainable for p in a.adapter_parameters())
    names = [p.name for p in a.parameters()]
    assert len(names) == len(set(names))


def test_spt4asr_breakdown_and_differential(toy):
    a = compose_spt4asr(toy)
    acc = a.account()
    assert set(acc.components) == {"vanilla", "deep", "respt_mlp", "lpt_encoder"}
    assert acc.total == sum(acc.components.values())
    alone = {m: symbolic_account(toy.config, AdapterSpec(method=m)).total for m in ("DPT", "ResPT", "LPT")}
    vanilla = symbolic_account(toy.config, AdapterSpec(method="VanillaSPT")).total
    assert acc.total == vanilla + sum(v - vanilla for v in alone.values())


def test_decoder_position_leaves_encoder_input_unchanged(toy):
    a = attach(toy, AdapterSpec(method="VanillaSPT", position="Decoder"))
    assert a.encoder_prompts() is None and a.decoder_prompts().shape == (16, 64)
    e = attach(toy, AdapterSpec(method="VanillaSPT", position="Entire"))
    assert e.encoder_prompts() is not None and e.decoder_prompts() is not None


def test_lpt_rows_lead_the_encoder_input(toy):
    a = attach(toy, AdapterSpec(method="LPT", n_enc=5, lpt_langs=("A", "B")))
    memory, _ = a.encode(np.zeros((7, 16)))
    assert memory.shape[1] == 2 + 5 + 7
    swapped = a.lpt_prompts(("B", "A")).data
    assert np.array_equal(swapped, a.lpt_prompts(("A", "B")).data[::-1])
    with pytest.raises(KeyError):
        a.lpt_prompts(("Klingon",))


def test_decoder_context_limit_on_attach(toy):
    with pytest.raises(ContextLimitError, match="decoder context limit"):
        attach(toy, AdapterSpec(method="VanillaSPT", position="Decoder", n_enc=256, n_dec=256))
    attach(toy, AdapterSpec(method="VanillaSPT", position="Encoder", n_enc=256, n_dec=256))


def test_spec_validation():
    with pytest.raises(ValueError, match="n_deep"):
        AdapterSpec(method="DPT", n_enc=4, n_dec=4, n_deep=8)
    with pytest.raises(ValueError):
        AdapterSpec(method="LoRA", lora_rank=0)
    with pytest.raises(ValueError):
        AdapterSpec(method="LoRA", lora_targets=("x",))
    with pytest.raises(ValueError):
        AdapterSpec(method="Nope")


def test_lora_zero_b_is_identity():
    rng = np.random.default_rng(0)
    W = ad.Parameter(rng.normal(size=(6, 5)), "W", trainable=False)
    layer = LoraLayer("w", 6, 5, 2, 4.0, rng)
    x = ad.tensor(rng.normal(size=(3, 5)))
    assert np.array_equal(lora_forward(x, W, None, layer).data, (x.data @ W.data.T))


def test_lora_matches_materialized_weight():
    rng = np.random.default_rng(1)
    W = ad.Parameter(rng.normal(size=(6, 5)), "W", trainable=False)
    b = ad.Parameter(rng.normal(size=6), "b", trainable=False)
    layer = LoraLayer("w", 6, 5, 3, 5.0, rng)
    layer.B.data[...] = rng.normal(size=(6, 3))
    x = ad.tensor(rng.normal(size=(4, 5)))
    merged = W.data + (5.0 / 3) * layer.B.data @ layer.A.data
    np.testing.assert_allclose(lora_forward(x, W, b, layer).data, x.data @ merged.T + b.data,
                               rtol=0, atol=1e-12)


def test_lora_full_rank_reduction():
    rng = np.random.default_rng(2)
    W = ad.Parameter(rng.normal(size=(4, 4)), "W", trainable=False)
    layer = LoraLayer("w", 4, 4, 4, 8.0, rng)
    dW = rng.normal(size=(4, 4))
    layer.A.data[...] = np.eye(4)
    layer.B.data[...] = dW
    x = ad.tensor(rng.normal(size=(2, 4)))
    np.testing.assert_allclose(lora_forward(x, W, None, layer).data, x.data @ (W.data + 2.0 * dW).T,
                               rtol=0, atol=1e-12)


def test_lora_attached_forward_is_bit_identical_at_init(toy, small_cs):
    batch = make_batch(small_cs, toy.tokens)
    memory, mask = toy.encode(batch.features, batch.lengths)
    base = toy.decode_forward(memory, mask, batch.prefix, batch.inputs).data
    a = attach(toy, AdapterSpec(method="LoRA"))
    assert np.array_equal(a.forward(batch.features, batch.prefix, batch.inputs, batch.lengths).data, base)


def test_respt_identity_and_oracle():
    rng = np.random.default_rng(3)
    mlp = ResidualMLP("r", 8, 4, rng)
    P = rng.normal(size=(5, 8))
    assert np.array_equal(respt_reparam(P, mlp).data, P)
    mlp.fc1_w.data[...] = rng.normal(size=(4, 8))
    mlp.fc1_b.data[...] = rng.normal(size=4)
    mlp.fc2_w.data[...] = rng.normal(size=(8, 4))
    mlp.fc2_b.data[...] = rng.normal(size=8)
    h = P @ mlp.fc1_w.data.T + mlp.fc1_b.data
    h = 0.5 * h * (1 + np.tanh(0.7978845608 * (h + 0.044715 * h**3)))
    ref = P + h @ mlp.fc2_w.data.T + mlp.fc2_b.data
    np.testing.assert_allclose(respt_reparam(P, mlp).data, ref, rtol=0, atol=1e-12)
    mlp.fc1_b.data[...] = 0
    mlp.fc2_b.data[...] = 0
    assert np.array_equal(respt_reparam(np.zeros((2, 8)), mlp).data, np.zeros((2, 8)))


def test_lpt_identity_at_init(toy):
    a = attach(toy, AdapterSpec(method="LPT", lpt_langs=("B", "A")))
    rows = toy.params["decoder.embed"].data[[toy.tokens.lid("B"), toy.tokens.lid("A")]]
    assert np.array_equal(a.lpt_prompts().data, rows)


def test_dpt_inject_rows():
    rng = np.random.default_rng(4)
    hidden = ad.tensor(rng.normal(size=(2, 9, 4)))
    assert dpt_inject(hidden, ad.tensor(np.zeros((0, 4)))) is hidden
    P = ad.tensor(rng.normal(size=(3, 4)))
    out = dpt_inject(hidden, P, offset=2).data
    assert out.shape == (2, 9, 4)
    assert np.array_equal(out[:, :2], hidden.data[:, :2])
    assert np.array_equal(out[:, 2:5], np.broadcast_to(P.data, (2, 3, 4)))
    assert np.array_equal(out[:, 5:], hidden.data[:, 5:])
    with pytest.raises(ValueError, match="vanilla prompts"):
        dpt_inject(hidden, ad.tensor(np.zeros((10, 4))))


def test_deep_prompts_need_slots():
    with pytest.raises(ValueError, match="prompt"):
        AdapterSpec(method="DPT", n_enc=0, n_dec=0, n_deep=4)


def _randomize_adapter(a, rng):
    for p in a.adapter_parameters():
        p.data[...] = rng.normal(0, 0.1, p.shape)


@pytest.mark.parametrize("method", [m for m in METHODS if m not in ("FFT", "WholeModelSPT")])
def test_every_adapter_parameter_is_wired(method, toy, small_cs):
    a = attach(toy, AdapterSpec(method=method, n_enc=4, n_dec=4, lpt_hidden=16))
    _randomize_adapter(a, np.random.default_rng(5))
    batch = make_batch(small_cs, toy.tokens)

    def logits():
        with ad.no_grad():
            return a.forward(batch.features, batch.prefix, batch.inputs, batch.lengths).data

    def loss():
        with ad.no_grad():
            return float(batch_loss(a, batch).data)

    last_dec = f"prompt.deep.decoder.block{toy.config.n_dec_blocks - 1}"
    rng = np.random.default_rng(6)
    l0, z0 = loss(), logits()
    for p in a.adapter_parameters():
        # random, not constant: layer-norm outputs are zero-mean, so a
        # constant shift of a weight applied to them can cancel exactly
        saved = p.data.copy()
        p.data += rng.normal(0, 0.05, p.shape)
        l1, z1 = loss(), logits()
        p.data[...] = saved
        if p.name == last_dec:
            # rewrites decoder prompt rows after the last block; only their
            # (loss-masked) logits can move
            assert l1 == l0 and not np.array_equal(z0, z1), p.name
        else:
            assert l1 != l0, p.name


def test_zero_deep_prompts_are_not_created(toy):
    a = attach(toy, AdapterSpec(method="DPT", n_enc=4, n_dec=4, n_deep=0))
    assert a.P_deep == {}


def test_zeroed_prompts_are_not_the_base(toy, small_cs):
    batch = make_batch(small_cs, toy.tokens)
    memory, mask = toy.encode(batch.features, batch.lengths)
    base = toy.decode_forward(memory, mask, batch.prefix, batch.inputs).data
    a = compose_spt4asr(toy, n_enc=4, n_dec=4)
    for p in a.adapter_parameters():
        p.data[...] = 0
    adapted = a.forward(batch.features, batch.prefix, batch.inputs, batch.lengths).data
    n = a.spec.dec_len
    assert not np.allclose(adapted[:, n:], base)
    assert np.array_equal(detach(a).decode_forward(memory, mask, batch.prefix, batch.inputs).data, base)


@pytest.mark.parametrize("method", DETACHABLE)
def test_detach_restores_base_after_training(method, toy, small_cs):
    batch = make_batch(small_cs, toy.tokens)
    memory, mask = toy.encode(batch.features, batch.lengths)
    before = toy.decode_forward(memory, mask, batch.prefix, batch.inputs).data
    snapshot = {k: p.data.copy() for k, p in toy.params.items()}
    a = attach(toy, AdapterSpec(method=method, n_enc=4, n_dec=4))
    train_run(a, small_cs, None, OptimizerConfig(epochs=3, batch_size=3))
    assert all(np.array_equal(snapshot[k], p.data) for k, p in toy.params.items())
    model = detach(a)
    memory, mask = model.encode(batch.features, batch.lengths)
    assert np.array_equal(model.decode_forward(memory, mask, batch.prefix, batch.inputs).data, before)
    with pytest.raises(RuntimeError, match="detached"):
        a.forward(batch.features, batch.prefix, batch.inputs)


@pytest.mark.parametrize("method", ["FFT", "WholeModelSPT"])
def test_detach_rejects_full_tuning(method, toy):
    with pytest.raises(ValueError, match="cannot detach"):
        detach(attach(toy, AdapterSpec(method=method)))
