import math

import numpy as np
import pytest
import torch

from modules.codec.rvq import TokenGrid
from modules.errors import InputError
from modules.model.attention import attend, causal_mask
from modules.model.token_lm import ModelConfig, TokenLM, sample_tokens


def _np(t):
    return t.detach().cpu().numpy().astype(np.float64)


def _layer_norm(x, norm):
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    return (x - mean) / math.sqrt(var + norm.eps) * _np(norm.weight) + _np(norm.bias)


def _gelu(x):
    return np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x])


def _attention(attn, queries, keys_values, causal):
    """One query position at a time, one head at a time."""
    wq, wk, wv, wo = (_np(p.weight) for p in (attn.q_proj, attn.k_proj, attn.v_proj, attn.o_proj))
    head_dim = attn.d_model // attn.n_heads
    outputs = []
    for t, query in enumerate(queries):
        visible = keys_values[:t + 1] if causal else keys_values
        merged = np.zeros(attn.d_model)
        for h in range(attn.n_heads):
            cols = slice(h * head_dim, (h + 1) * head_dim)
            q = (wq @ query)[cols]
            scores = np.array([q @ (wk @ kv)[cols] for kv in visible]) / math.sqrt(head_dim)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            merged[cols] = sum(w * (wv @ kv)[cols] for w, kv in zip(weights, visible))
        outputs.append(wo @ merged)
    return outputs


def reference_logits(model, tokens, text_states):
    """Straight-line forward pass over a single (N, T) grid."""
    n_codebooks, length = tokens.shape
    inputs = [_np(model.sos)]
    for t in range(length - 1):
        inputs.append(sum(_np(model.token_embeddings[n].weight)[tokens[n, t]] for n in range(n_codebooks)))
    x = [np.array(v) for v in inputs]
    for layer in model.layers:
        h = [_layer_norm(v, layer.self_norm) for v in x]
        x = [v + o for v, o in zip(x, _attention(layer.self_attn, h, h, causal=True))]
        h = [_layer_norm(v, layer.cross_norm) for v in x]
        x = [v + o for v, o in zip(x, _attention(layer.cross_attn, h, list(text_states), causal=False))]
        w1, b1 = _np(layer.ffn[0].weight), _np(layer.ffn[0].bias)
        w2, b2 = _np(layer.ffn[2].weight), _np(layer.ffn[2].bias)
        x = [v + w2 @ _gelu(w1 @ _layer_norm(v, layer.ffn_norm) + b1) + b2 for v in x]
    logits = np.zeros((n_codebooks, length, model.config.codebook_size))
    for t, v in enumerate(x):
        normed = _layer_norm(v, model.final_norm)
        for n in range(n_codebooks):
            logits[n, t] = _np(model.heads[n].weight) @ normed
    return logits


@pytest.fixture
def small_model():
    config = ModelConfig(n_codebooks=2, codebook_size=8, n_layers=2, d_model=8, n_heads=2, ffn_dim=16,
                         d_text=8, text_layers=1, text_heads=2, text_ffn_dim=16, max_text_tokens=8,
                         dtype='float64')
    return TokenLM.build(config, seed=4).eval()


def test_forward_matches_reference(small_model):
    tokens = np.random.default_rng(0).integers(8, size=(2, 5))
    text = small_model.encode_text("Add drums")
    with torch.no_grad():
        logits = small_model.logits(tokens, text)[0].numpy()
    expected = reference_logits(small_model, tokens, _np(text.states[0]))
    np.testing.assert_allclose(logits, expected, atol=1e-6)


def test_single_frame_shape(base_model, model_config):
    text = base_model.encode_text("Add bass")
    logits = base_model.logits(np.zeros((model_config.n_codebooks, 1), dtype=np.int64), text)
    assert logits.shape == (1, model_config.n_codebooks, 1, model_config.codebook_size)


def test_causality(base_model, model_config):
    torch.manual_seed(0)
    inputs = torch.randn(1, 6, model_config.d_model)
    text = base_model.encode_text("Remove piano")
    perturbed = inputs.clone()
    perturbed[0, 3] += 1.0
    with torch.no_grad():
        a = base_model(inputs, text).logits
        b = base_model(perturbed, text).logits
    assert torch.allclose(a[:, :, :3], b[:, :, :3], atol=1e-6)
    assert not torch.allclose(a[:, :, 3:], b[:, :, 3:])


def test_zero_tokens_embed_to_row_sums(base_model, model_config):
    tokens = np.zeros((model_config.n_codebooks, 4), dtype=np.int64)
    embedded = base_model.embed_tokens(tokens)[0]
    expected = sum(table.weight[0] for table in base_model.token_embeddings)
    for t in range(4):
        assert torch.allclose(embedded[t], expected)


def test_embedding_locality(base_model, model_config):
    tokens = np.random.default_rng(1).integers(model_config.codebook_size, size=(model_config.n_codebooks, 5))
    changed = tokens.copy()
    changed[1, 2] = (changed[1, 2] + 1) % model_config.codebook_size
    a, b = base_model.embed_tokens(tokens)[0], base_model.embed_tokens(changed)[0]
    differs = [not torch.equal(a[t], b[t]) for t in range(5)]
    assert differs == [False, False, True, False, False]


def test_embedding_matches_lookup_loop(base_model, model_config):
    tokens = np.random.default_rng(2).integers(model_config.codebook_size, size=(2, 7))
    embedded = base_model.embed_tokens(tokens)[0]
    for t in range(7):
        expected = (base_model.token_embeddings[0].weight[tokens[0, t]]
                    + base_model.token_embeddings[1].weight[tokens[1, t]])
        assert torch.allclose(embedded[t], expected)


def test_out_of_range_tokens(base_model, model_config):
    with pytest.raises(InputError):
        base_model.embed_tokens(np.full((model_config.n_codebooks, 2), model_config.codebook_size))
    with pytest.raises(InputError):
        base_model.embed_tokens(np.zeros((model_config.n_codebooks + 1, 2), dtype=np.int64))


def test_text_embedding_shape_and_determinism(base_model, model_config):
    first = base_model.encode_text("Add guitar")
    second = base_model.encode_text("Add guitar")
    assert first.states.shape == (1, 2, model_config.d_text)
    assert torch.equal(first.states, second.states)


def test_instructions_differ(base_model):
    add = base_model.encode_text("add drums").states
    remove = base_model.encode_text("remove drums").states
    assert not torch.allclose(add, remove)


def test_empty_instruction(base_model):
    with pytest.raises(InputError):
        base_model.encode_text("")
    with pytest.raises(InputError):
        base_model.encode_text("   ")


def test_greedy_generation_is_deterministic(base_model, model_config):
    text = base_model.encode_text("Add synth")
    a = base_model.generate(text, length=5)
    b = base_model.generate(text, length=5)
    assert isinstance(a, TokenGrid)
    assert a.tokens.shape == (model_config.n_codebooks, 5)
    np.testing.assert_array_equal(a.tokens, b.tokens)


def test_generation_length_must_be_positive(base_model):
    with pytest.raises(InputError):
        base_model.generate(base_model.encode_text("Add synth"), length=0)


def test_sampling_matches_step_softmax(base_model, model_config):
    text = base_model.encode_text("Add strings")
    with torch.no_grad():
        step = base_model.logits(np.zeros((model_config.n_codebooks, 1), dtype=np.int64), text)[0, :, 0, :]
    probs = torch.softmax(step, dim=-1).numpy()
    generator = torch.Generator().manual_seed(0)
    draws = np.stack([sample_tokens(step, 1.0, 0, generator).numpy() for _ in range(1000)])
    for n in range(model_config.n_codebooks):
        counts = np.bincount(draws[:, n], minlength=model_config.codebook_size)
        sigma = np.sqrt(1000 * probs[n] * (1 - probs[n]))
        assert np.all(np.abs(counts - 1000 * probs[n]) <= 4 * sigma + 1)


def test_top_k_restricts_support():
    logits = torch.tensor([[0.0, 1.0, 2.0, 3.0]])
    generator = torch.Generator().manual_seed(1)
    draws = {int(sample_tokens(logits, 1.0, 2, generator)) for _ in range(200)}
    assert draws <= {2, 3}


def test_build_is_seeded(model_config):
    a, b = TokenLM.build(model_config, seed=3), TokenLM.build(model_config, seed=3)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), name


def test_freeze_disables_gradients(base_model):
    base_model.freeze()
    assert base_model.frozen
    assert not any(p.requires_grad for p in base_model.parameters())
    base_model.unfreeze()
    assert all(p.requires_grad for p in base_model.parameters())


class TestAttentionWeights:
    def _qkv(self, batch, heads, tq, tk, seed=0):
        generator = torch.Generator().manual_seed(seed)
        q = torch.randn(batch, heads, tq, 4, generator=generator)
        k = torch.randn(batch, heads, tk, 4, generator=generator)
        v = torch.randn(batch, heads, tk, 4, generator=generator)
        return q, k, v

    def test_causal_rows_sum_to_one(self):
        _, weights = attend(*self._qkv(2, 3, 7, 7), mask=causal_mask(7))
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(2, 3, 7), atol=1e-6, rtol=0)
        assert torch.all(weights.triu(diagonal=1) == 0)
        assert torch.allclose(weights[..., 0, 0], torch.ones(2, 3))

    def test_padded_keys_get_no_weight(self):
        valid = torch.tensor([[True, True, True, True, False, False],
                              [True, False, False, False, False, False]])
        _, weights = attend(*self._qkv(2, 2, 5, 6, seed=1), mask=valid[:, None, None, :])
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(2, 2, 5), atol=1e-6, rtol=0)
        assert torch.all(weights[0, ..., 4:] == 0)
        assert torch.all(weights[1, ..., 1:] == 0)
        assert torch.allclose(weights[1, ..., 0], torch.ones(2, 5))

    def test_decoder_weights_are_distributions(self, base_model, random_grids):
        target, _ = random_grids
        text = base_model.encode_texts(["Add drums", "Remove bass and piano"])
        assert not bool(text.mask[0].all())
        with torch.no_grad():
            out = base_model.forward(base_model.decoder_inputs(target), text, return_weights=True)
        assert len(out.attention) == base_model.config.n_layers
        for layer in out.attention:
            for kind in ('self', 'cross'):
                sums = layer[kind].sum(dim=-1)
                torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)
            padded = ~text.mask[:, None, None, :].expand_as(layer['cross'])
            assert torch.all(layer['cross'][padded] == 0)
            assert torch.all(layer['self'].triu(diagonal=1) == 0)
