import numpy as np
import pytest
import torch
import torch.nn as nn

from modules.errors import ConfigurationError, InputError
from modules.model.attention import attend, merge_heads
from modules.model.audio_fusion import AudioFusion, condition_forward, fused_attention, init_fusion
from modules.model.editor import InstructionEditor
from modules.model.token_lm import ModelConfig, TokenLM


def test_gates_start_at_zero(base_model):
    for seed in (0, 1, 99):
        fusion = init_fusion(base_model, t_max=50, seed=seed)
        assert torch.equal(fusion.gates, torch.zeros(base_model.config.n_layers))


def test_init_is_seeded(base_model):
    a = init_fusion(base_model, t_max=50, seed=5)
    b = init_fusion(base_model, t_max=50, seed=5)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), name


def test_init_rejects_bad_sizes(base_model):
    with pytest.raises(ConfigurationError):
        init_fusion(base_model, t_max=0, seed=0)
    with pytest.raises(ConfigurationError):
        init_fusion(base_model, t_max=50, seed=0, bottleneck=0)


def test_bottleneck_layout(base_model, model_config):
    fusion = init_fusion(base_model, t_max=50, seed=0, bottleneck=3)
    count = sum(p.numel() for p in fusion.linear_cond.parameters())
    assert count == model_config.n_layers * 2 * model_config.d_model * 3


def test_zero_parameters_give_zero_states(base_model, model_config):
    fusion = AudioFusion(model_config.n_layers, model_config.d_model, t_max=50)
    states = condition_forward(torch.zeros(1, 4, model_config.d_model), fusion, base_model)
    assert len(states.states) == model_config.n_layers + 1
    for state in states.states:
        assert torch.equal(state, torch.zeros_like(state))


def test_single_layer_hand_evaluation():
    config = ModelConfig(n_codebooks=1, codebook_size=4, n_layers=1, d_model=1, n_heads=1, ffn_dim=2,
                         d_text=1, text_layers=1, text_heads=1, text_ffn_dim=2, max_text_tokens=4,
                         dtype='float64')
    base = TokenLM.build(config, seed=0)
    attn = base.layers[0].self_attn
    fusion = AudioFusion(1, 1, t_max=4).to(torch.float64)
    with torch.no_grad():
        for proj, value in ((attn.q_proj, 0.5), (attn.k_proj, -1.0), (attn.v_proj, 3.0), (attn.o_proj, 2.0)):
            proj.weight.fill_(value)
        fusion.z0_cond.fill_(0.25)
        fusion.linear_cond[0].weight.fill_(4.0)
        fusion.pos_embeddings[0].fill_(-0.5)
    cond = torch.full((1, 1, 1), 0.5, dtype=torch.float64)

    states = condition_forward(cond, fusion, base)
    # h = 0.25 + 4 * 0.5 - 0.5 = 1.75; a single key gets weight 1, so z = W_O W_V h
    assert states.states[1].item() == pytest.approx(2.0 * 3.0 * 1.75)
    assert states.queries[0].item() == pytest.approx(0.5 * 1.75)


def test_injection_is_layer_local(base_model, model_config):
    fusion = init_fusion(base_model, t_max=50, seed=0)
    cond = torch.randn(1, 5, model_config.d_model, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        before = condition_forward(cond, fusion, base_model)
        fusion.pos_embeddings[1].add_(1.0)
        after = condition_forward(cond, fusion, base_model)
    assert torch.equal(before.states[1], after.states[1])
    assert not torch.allclose(before.states[2], after.states[2])


def test_condition_longer_than_t_max(base_model, model_config):
    fusion = init_fusion(base_model, t_max=4, seed=0)
    with pytest.raises(ConfigurationError):
        condition_forward(torch.zeros(1, 5, model_config.d_model), fusion, base_model)


def _scalar(value):
    return torch.tensor([[[[value]]]], dtype=torch.float64)


def test_fused_attention_hand_example():
    out_proj = nn.Linear(1, 1, bias=False).to(torch.float64)
    with torch.no_grad():
        out_proj.weight.fill_(1.0)
    q, k, v = _scalar(1.0), _scalar(1.0), _scalar(3.0)
    fused = fused_attention(q, k, v, _scalar(0.0), _scalar(1.0), _scalar(2.0), out_proj,
                            torch.tensor(1.0, dtype=torch.float64))
    # O = 3 from the single self-attention key, O'' = 2
    assert fused.item() == pytest.approx(5.0)


def test_zero_gate_is_bitwise_identity():
    torch.manual_seed(0)
    q, k, v, qc, kc, vc = (torch.randn(1, 2, 4, 3) for _ in range(6))
    out_proj = nn.Linear(6, 6, bias=False)
    reference = out_proj(merge_heads(attend(q, k, v)[0]))
    fused = fused_attention(q, k, v, qc, kc, vc, out_proj, torch.tensor(0.0))
    assert torch.equal(fused, reference)


def test_fused_attention_length_mismatch():
    out_proj = nn.Linear(2, 2, bias=False)
    q = torch.zeros(1, 1, 3, 2)
    cond = torch.zeros(1, 1, 4, 2)
    with pytest.raises(InputError):
        fused_attention(q, q, q, cond, cond, cond, out_proj, torch.tensor(0.0))


INSTRUMENTS = ('drums', 'bass', 'piano', 'guitar', 'strings', 'synth')


@pytest.mark.parametrize('seed', range(100))
def test_fresh_editor_matches_base_bitwise(editor, model_config, seed):
    rng = np.random.default_rng(seed)
    batch, length = int(rng.integers(1, 4)), int(rng.integers(1, 51))
    shape = (batch, model_config.n_codebooks, length)
    target = torch.as_tensor(rng.integers(model_config.codebook_size, size=shape))
    condition = torch.as_tensor(rng.integers(model_config.codebook_size, size=shape))
    instructions = [f"{rng.choice(['Add', 'Remove', 'Extract'])} {rng.choice(INSTRUMENTS)}"
                    for _ in range(batch)]
    with torch.no_grad():
        fused = editor(target, condition, instructions)
        base = editor.base.logits(target, editor.base.encode_texts(instructions))
    assert torch.equal(fused, base)


def test_float64_editor_matches_base(tiny_config, random_grids):
    tiny_config.set('model.dtype', 'float64')
    base = TokenLM.build(ModelConfig.from_config(tiny_config), seed=1)
    editor = InstructionEditor.attach(base, tiny_config, seed=1)
    target, condition = random_grids
    with torch.no_grad():
        fused = editor(target, condition, ["Extract piano", "Add synth"])
        expected = base.logits(target, base.encode_texts(["Extract piano", "Add synth"]))
    assert torch.allclose(fused, expected, atol=1e-12, rtol=0)


def test_condition_changes_output_with_open_gates(randomized_editor, random_grids):
    target, condition = random_grids
    perturbed = condition.clone()
    perturbed[:, 0, 2] = (perturbed[:, 0, 2] + 1) % randomized_editor.base.config.codebook_size
    with torch.no_grad():
        a = randomized_editor(target, condition, ["Add drums", "Add drums"])
        b = randomized_editor(target, perturbed, ["Add drums", "Add drums"])
    assert not torch.allclose(a, b)


def test_fused_decoder_is_causal(randomized_editor, random_grids):
    target, condition = random_grids
    perturbed = target.clone()
    perturbed[:, :, 3] = (perturbed[:, :, 3] + 1) % randomized_editor.base.config.codebook_size
    with torch.no_grad():
        a = randomized_editor(target, condition, ["Add drums", "Add drums"])
        b = randomized_editor(perturbed, condition, ["Add drums", "Add drums"])
    # Token t is the input at position t + 1
    assert torch.allclose(a[:, :, :4], b[:, :, :4], atol=1e-6)
    assert not torch.allclose(a[:, :, 4:], b[:, :, 4:])


def test_grid_length_mismatch(editor, random_grids):
    target, condition = random_grids
    with pytest.raises(InputError):
        editor(target, condition[:, :, :5], ["Add drums", "Add drums"])


def test_only_adapters_receive_gradients(editor, random_grids):
    target, condition = random_grids
    editor(target, condition, ["Add drums", "Remove bass"]).sum().backward()
    for name, param in editor.trainable_parameters().items():
        assert param.requires_grad and param.grad is not None, name
    for name, param in editor.frozen_parameters().items():
        assert param.grad is None, name
    assert editor.fusion.gates.grad.abs().sum() > 0


def test_zero_adapters_restores_values(randomized_editor):
    gates = randomized_editor.fusion.gates.detach().clone()
    with randomized_editor.zero_adapters():
        assert torch.equal(randomized_editor.fusion.gates, torch.zeros_like(gates))
        assert all(torch.equal(p.B, torch.zeros_like(p.B)) for p in randomized_editor.lora.q)
    assert torch.equal(randomized_editor.fusion.gates, gates)


def test_generate_edit_keeps_condition_length(editor, random_grids):
    _, condition = random_grids
    grid = editor.generate_edit(condition[0].numpy(), "Add guitar")
    assert grid.tokens.shape == tuple(condition[0].shape)
    again = editor.generate_edit(condition[0].numpy(), "Add guitar")
    assert (grid.tokens == again.tokens).all()
