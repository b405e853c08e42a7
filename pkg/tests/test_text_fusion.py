import pytest
import torch

from modules.errors import ConfigurationError, InputError
from modules.model.editor import InstructionEditor
from modules.model.text_encoder import TextEmbedding
from modules.model.text_fusion import LoraPair, apply_lora, init_lora, lora_cross_attention


def test_b_factors_start_at_zero(base_model):
    lora = init_lora(base_model, rank=2, seed=3)
    for pair in list(lora.q) + list(lora.v):
        assert torch.equal(pair.B, torch.zeros_like(pair.B))
        assert pair.A.abs().sum() > 0


def test_a_factors_are_seeded(base_model):
    a, b = init_lora(base_model, rank=2, seed=3), init_lora(base_model, rank=2, seed=3)
    for p, q in zip(a.q, b.q):
        assert torch.equal(p.A, q.A)


def test_rank_must_be_positive(base_model):
    with pytest.raises(ConfigurationError):
        init_lora(base_model, rank=0, seed=0)


@pytest.mark.parametrize('rank', [1, 2, 4])
def test_trainable_count(base_model, model_config, rank):
    lora = init_lora(base_model, rank=rank, seed=0)
    d = model_config.d_model
    assert model_config.d_text == d
    assert sum(p.numel() for p in lora.parameters()) == model_config.n_layers * 2 * (rank * d + rank * d)


def test_apply_lora_hand_example():
    pair = LoraPair(2, 2, rank=1)
    with torch.no_grad():
        pair.A.copy_(torch.tensor([[1.0, 0.0]]))
        pair.B.copy_(torch.tensor([[0.0, 1.0]]))
    weight = torch.eye(2)
    assert torch.equal(pair.delta(), torch.tensor([[0.0, 1.0], [0.0, 0.0]]))
    assert torch.equal(apply_lora(weight, pair), torch.tensor([[1.0, 1.0], [0.0, 1.0]]))
    assert torch.equal(weight, torch.eye(2))


def test_apply_lora_zero_b_is_identity():
    pair = LoraPair(3, 2, rank=2)
    with torch.no_grad():
        pair.A.normal_()
    weight = torch.randn(3, 2)
    assert torch.equal(apply_lora(weight, pair), weight)


def test_apply_lora_shape_mismatch():
    with pytest.raises(InputError):
        apply_lora(torch.eye(3), LoraPair(2, 2, rank=1))


def test_zero_b_cross_attention_is_bitwise_base(base_model, model_config):
    lora = init_lora(base_model, rank=2, seed=0)
    text = base_model.encode_texts(["Add drums", "Extract the bass"])
    states = torch.randn(2, 5, model_config.d_model, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        for layer in range(model_config.n_layers):
            adapted = lora_cross_attention(states, text, layer, base_model, lora)
            plain = base_model.layers[layer].text_attention(states, text)
            assert torch.equal(adapted, plain)


def test_nonzero_b_changes_output(base_model, model_config):
    lora = init_lora(base_model, rank=2, seed=0)
    with torch.no_grad():
        lora.v[0].B.fill_(0.5)
    text = base_model.encode_text("Add drums")
    states = torch.randn(1, 3, model_config.d_model, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        adapted = lora_cross_attention(states, text, 0, base_model, lora)
        plain = lora_cross_attention(states, text, 0, base_model, None)
    assert not torch.allclose(adapted, plain)


def test_single_text_token_gets_full_weight(base_model, model_config):
    lora = init_lora(base_model, rank=2, seed=0)
    text = base_model.encode_text("drums")
    q_delta, v_delta = lora.layer_deltas(0)
    states = torch.randn(1, 4, model_config.d_model)
    _, weights = base_model.layers[0].text_attention(states, text, q_delta=q_delta, v_delta=v_delta,
                                                     return_weights=True)
    assert torch.equal(weights, torch.ones_like(weights))


def test_all_masked_instruction_rejected(base_model, model_config):
    lora = init_lora(base_model, rank=2, seed=0)
    text = TextEmbedding(torch.zeros(1, 2, model_config.d_text), torch.zeros(1, 2, dtype=torch.bool))
    with pytest.raises(InputError):
        lora_cross_attention(torch.zeros(1, 3, model_config.d_model), text, 0, base_model, lora)


def test_editor_without_text_fusion(base_model, tiny_config):
    editor = InstructionEditor.attach(base_model, tiny_config, seed=0, text_fusion_enabled=False)
    assert not editor.text_fusion_enabled
    assert not any(name.startswith('lora.') for name in editor.trainable_parameters())
    assert any(name.startswith('lora.') for name in InstructionEditor.attach(
        base_model, tiny_config, seed=0).trainable_parameters())
