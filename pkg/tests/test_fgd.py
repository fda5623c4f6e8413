import dataclasses

import numpy as np
import pytest
import torch
import torch.nn as nn

from msht.backbone import build_backbone, full_backbone_config, tiny_backbone_config
from msht.fgd import (DecoderBlock, FgdConfig, FocusBlock, GuidancePair, HybridEmbed,
                      MultiHeadGuidedAttention, MultiHeadSelfAttention,
                      MultiStageHybridTransformer, SharedEmbeddings,
                      StackedHybridTransformer, build_variant, check_config_compat,
                      count_parameters, derive_pool_windows, load_checkpoint,
                      load_checkpoint_into, resolve_variant, save_checkpoint)

from oracles import mhga_reference, mhsa_reference


TINY = FgdConfig(token_dim=64, heads=4)


def _shared(num_patches=4, dim=64, **kwargs):
    return SharedEmbeddings(num_patches, dim, **kwargs)


# ---------------------------------------------------------------------------
# configuration


def test_token_dim_must_divide_heads():
    with pytest.raises(ValueError, match="not divisible"):
        FgdConfig(token_dim=65, heads=4)


def test_pool_windows_must_cover_stages():
    with pytest.raises(ValueError, match="pool_windows"):
        FgdConfig(token_dim=64, heads=4, stage_count=3)


def test_derived_windows_match_preset():
    assert derive_pool_windows(tiny_backbone_config(), 4) == (8, 4, 2, 1)
    assert derive_pool_windows(tiny_backbone_config(), 3) == (4, 2, 1)
    assert derive_pool_windows(full_backbone_config(), 4) == (8, 4, 2, 1)


def test_compat_check_patch_count():
    assert check_config_compat(tiny_backbone_config(), TINY) == 4
    assert check_config_compat(full_backbone_config(), FgdConfig()) == 144


def test_compat_check_rejects_bad_windows():
    bad = FgdConfig(token_dim=64, heads=4, pool_windows=(8, 4, 2, 2))
    with pytest.raises(ValueError, match="stage 4"):
        check_config_compat(tiny_backbone_config(), bad)


# ---------------------------------------------------------------------------
# embeddings


def test_shared_embedding_token_count():
    shared = _shared()
    assert shared.num_tokens == 5
    out = shared(torch.randn(2, 4, 64))
    assert out.shape == (2, 5, 64)


def test_class_token_starts_at_zero():
    shared = _shared()
    assert torch.equal(shared.class_token, torch.zeros(1, 1, 64))


def test_hybrid_embed_tiny_shape():
    torch.manual_seed(0)
    embed = HybridEmbed(128, 2, TINY)
    out = embed(torch.randn(3, 128, 2, 2), _shared())
    assert out.shape == (3, 5, 64)


def test_hybrid_embed_zero_map_yields_pos_encoding():
    torch.manual_seed(0)
    embed = HybridEmbed(128, 2, TINY)
    shared = _shared()
    with torch.no_grad():
        embed.proj.bias.zero_()
    out = embed(torch.zeros(2, 128, 2, 2), shared)
    assert torch.equal(out, shared.pos_encoding.expand(2, -1, -1))


def test_hybrid_embed_rejects_wrong_edge():
    embed = HybridEmbed(128, 2, TINY)
    with pytest.raises(ValueError, match="2x2"):
        embed(torch.randn(1, 128, 4, 4), _shared())


def test_hybrid_embed_rejects_indivisible_patch():
    cfg = dataclasses.replace(TINY, patch_size=3, pool_windows=(8, 4, 2, 1))
    with pytest.raises(ValueError, match="not divisible"):
        HybridEmbed(128, 2, cfg)


# ---------------------------------------------------------------------------
# focus block


def test_focus_block_tiny_shapes():
    torch.manual_seed(0)
    block = FocusBlock(16, 16, 8, 2, TINY, stage_index=1)
    pair = block(torch.randn(2, 16, 16, 16), _shared())
    assert pair.q.shape == (2, 5, 64)
    assert pair.k.shape == (2, 5, 64)
    assert pair.stage_index == 1


def test_focus_block_constant_input_weight_tied_gives_q_equals_k():
    torch.manual_seed(0)
    block = FocusBlock(16, 16, 8, 2, TINY, stage_index=1)
    with torch.no_grad():
        block.k_proj.weight.copy_(block.q_proj.weight)
        block.k_proj.bias.copy_(block.q_proj.bias)
    shared = _shared()
    # max pool equals avg pool on constant maps; the zero map keeps the
    # average summation exact, so the paths agree bit for bit
    pair = block(torch.zeros(1, 16, 16, 16), shared)
    assert torch.equal(pair.q, pair.k)
    pair = block(torch.full((1, 16, 16, 16), 0.7), shared)
    assert torch.allclose(pair.q, pair.k, atol=1e-6)


def test_focus_block_error_names_stage():
    with pytest.raises(ValueError, match="stage 2"):
        FocusBlock(32, 8, 8, 2, TINY, stage_index=2)
    block = FocusBlock(32, 8, 4, 2, TINY, stage_index=2)
    with pytest.raises(ValueError, match="stage 2"):
        block(torch.randn(1, 32, 16, 16), _shared())


# ---------------------------------------------------------------------------
# attention blocks


def test_mhsa_single_token_weight_is_one():
    torch.manual_seed(0)
    attn = MultiHeadSelfAttention(64, 4)
    x = torch.randn(1, 1, 64)
    out, weights = attn(x, return_weights=True)
    assert out.shape == (1, 1, 64)
    assert torch.allclose(weights, torch.ones(1, 4, 1, 1))


def test_mhsa_identical_rows_give_identical_outputs():
    torch.manual_seed(1)
    attn = MultiHeadSelfAttention(64, 4)
    row = torch.randn(1, 1, 64)
    x = row.expand(1, 6, 64).contiguous()
    out = attn(x)
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-6)


@pytest.mark.parametrize("heads", [1, 4])
@pytest.mark.parametrize("literal", [False, True])
def test_mhsa_matches_triple_loop_oracle(heads, literal):
    torch.manual_seed(heads + 10 * literal)
    attn = MultiHeadSelfAttention(64, heads, projection_scaled_attention=literal).double()
    x = torch.randn(2, 5, 64, dtype=torch.float64)
    out, weights = attn(x, return_weights=True)
    ref_out, ref_weights = mhsa_reference(attn, x)
    assert np.abs(out.detach().numpy() - ref_out).max() < 1e-10
    assert np.abs(weights.detach().numpy() - ref_weights).max() < 1e-10
    assert np.abs(weights.detach().numpy().sum(-1) - 1.0).max() < 1e-6


def test_mhsa_rejects_non_finite_input():
    attn = MultiHeadSelfAttention(64, 4)
    x = torch.full((1, 3, 64), float("nan"))
    with pytest.raises(ValueError, match="non-finite"):
        attn(x)


def test_mhga_identical_queries_give_identical_outputs():
    torch.manual_seed(2)
    attn = MultiHeadGuidedAttention(64, 4)
    stream = torch.randn(1, 5, 64)
    q = torch.randn(1, 1, 64).expand(1, 5, 64).contiguous()
    k = torch.randn(1, 5, 64)
    out = attn(stream, GuidancePair(q, k, 1))
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-6)


def test_mhga_zero_guidance_gives_mean_of_values():
    torch.manual_seed(3)
    attn = MultiHeadGuidedAttention(64, 4)
    stream = torch.randn(1, 5, 64)
    zeros = torch.zeros(1, 5, 64)
    out, weights = attn(stream, GuidancePair(zeros, zeros, 1), return_weights=True)
    assert torch.allclose(weights, torch.full_like(weights, 1.0 / 5))
    v = (attn.v_proj(stream) * attn.proj_scale).mean(dim=1, keepdim=True)
    expected = attn.proj(v).expand_as(out)
    assert torch.allclose(out, expected, atol=1e-6)


@pytest.mark.parametrize("heads", [1, 4])
def test_mhga_matches_triple_loop_oracle(heads):
    torch.manual_seed(heads)
    attn = MultiHeadGuidedAttention(64, heads).double()
    stream = torch.randn(2, 5, 64, dtype=torch.float64)
    q = torch.randn(2, 5, 64, dtype=torch.float64)
    k = torch.randn(2, 5, 64, dtype=torch.float64)
    out, weights = attn(stream, GuidancePair(q, k, 1), return_weights=True)
    ref_out, ref_weights = mhga_reference(attn, stream, q, k)
    assert np.abs(out.detach().numpy() - ref_out).max() < 1e-10
    assert np.abs(weights.detach().numpy() - ref_weights).max() < 1e-10


def test_mhga_rejects_length_mismatch():
    attn = MultiHeadGuidedAttention(64, 4)
    stream = torch.randn(1, 5, 64)
    short = torch.randn(1, 3, 64)
    with pytest.raises(ValueError, match="does not match"):
        attn(stream, GuidancePair(short, short, 1))


def test_mhsa_permutation_equivariance_on_patch_tokens():
    torch.manual_seed(4)
    attn = MultiHeadSelfAttention(64, 4)
    x = torch.randn(1, 7, 64)  # token 0 = class token, 1..6 = patches
    perm = torch.tensor([0, 3, 1, 2, 6, 4, 5])
    out = attn(x)
    out_perm = attn(x[:, perm])
    assert torch.allclose(out[:, perm], out_perm, atol=1e-5)
    assert torch.allclose(out[:, 0], out_perm[:, 0], atol=1e-5)


# ---------------------------------------------------------------------------
# decoder


def _random_guidance(batch=2, tokens=5, dim=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return GuidancePair(torch.randn(batch, tokens, dim, generator=g),
                        torch.randn(batch, tokens, dim, generator=g), 1)


def test_decoder_preserves_shape():
    torch.manual_seed(5)
    decoder = DecoderBlock(TINY)
    z = torch.randn(2, 5, 64)
    assert decoder(z, _random_guidance()).shape == (2, 5, 64)


def test_decoder_zeroed_output_projections_is_identity():
    torch.manual_seed(6)
    decoder = DecoderBlock(TINY)
    with torch.no_grad():
        for module in (decoder.self_attn.proj, decoder.guided_attn.proj,
                       decoder.ffn1.fc2, decoder.ffn2.fc2):
            module.weight.zero_()
            module.bias.zero_()
    z = torch.randn(2, 5, 64)
    assert torch.equal(decoder(z, _random_guidance(batch=2)), z)


# ---------------------------------------------------------------------------
# full model


def _tiny_model(seed=0, **overrides):
    cfg = dataclasses.replace(TINY, **overrides) if overrides else TINY
    torch.manual_seed(seed)
    return MultiStageHybridTransformer(tiny_backbone_config(), cfg)


def test_model_confidences_sum_to_one():
    model = _tiny_model()
    conf = model.predict(torch.randn(3, 3, 64, 64))
    assert conf.shape == (3, 2)
    assert torch.allclose(conf.sum(dim=1), torch.ones(3), atol=1e-6)


def test_model_forward_is_bit_identical_across_runs(tiny_backbone_cfg, tiny_fgd_cfg):
    x = torch.randn(2, 3, 64, 64)
    outputs = []
    for _ in range(2):
        model = build_variant("MSHT", tiny_backbone_cfg, tiny_fgd_cfg, init_seed=42)
        model.eval()
        with torch.no_grad():
            outputs.append(model.predict(x))
    assert torch.equal(outputs[0], outputs[1])


def test_shared_embeddings_are_referentially_shared():
    model = _tiny_model(seed=1)
    model.eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        features = model.backbone(x)
        embed_before = model.hybrid_embed(features.stage4, model.shared)
        focus_before = [fb(features[i], model.shared) for i, fb in enumerate(model.focus_blocks)]

        delta = torch.randn_like(model.shared.pos_encoding)
        model.shared.pos_encoding.add_(delta)

        embed_after = model.hybrid_embed(features.stage4, model.shared)
        focus_after = [fb(features[i], model.shared) for i, fb in enumerate(model.focus_blocks)]

    assert torch.allclose(embed_after - embed_before, delta.expand_as(embed_before), atol=1e-6)
    for before, after in zip(focus_before, focus_after):
        assert torch.allclose(after.q - before.q, delta.expand_as(before.q), atol=1e-6)
        assert torch.allclose(after.k - before.k, delta.expand_as(before.k), atol=1e-6)


def test_class_token_mutation_is_seen_everywhere():
    model = _tiny_model(seed=2)
    model.eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        features = model.backbone(x)
        before = model.hybrid_embed(features.stage4, model.shared)
        pair_before = model.focus_blocks[0](features.stage1, model.shared)
        model.shared.class_token.add_(1.0)
        after = model.hybrid_embed(features.stage4, model.shared)
        pair_after = model.focus_blocks[0](features.stage1, model.shared)
    assert torch.allclose(after[:, 0] - before[:, 0], torch.ones_like(before[:, 0]))
    assert torch.allclose(pair_after.q[:, 0] - pair_before.q[:, 0], torch.ones_like(before[:, 0]))
    assert torch.equal(after[:, 1:], before[:, 1:])


# ---------------------------------------------------------------------------
# variants


def test_unknown_variant_lists_valid_names():
    with pytest.raises(ValueError) as excinfo:
        resolve_variant("Hybrid2")
    message = str(excinfo.value)
    assert "Hybrid2" in message and "MSHT" in message and "CBAM_ATT" in message


def test_variant_parameter_counts(tiny_backbone_cfg, tiny_fgd_cfg):
    msht = build_variant("MSHT", tiny_backbone_cfg, tiny_fgd_cfg)
    hybrid1 = build_variant("Hybrid1", tiny_backbone_cfg, tiny_fgd_cfg)
    assert count_parameters(msht) > count_parameters(hybrid1)


def test_no_att_equals_msht_with_identity_attention(tiny_backbone_cfg, tiny_fgd_cfg):
    x = torch.randn(2, 3, 64, 64)
    no_att = build_variant("No_ATT", tiny_backbone_cfg, tiny_fgd_cfg, init_seed=9)
    oracle = build_variant("MSHT", tiny_backbone_cfg, tiny_fgd_cfg, init_seed=9)
    for block in oracle.focus_blocks:
        block.attention = nn.Identity()
    no_att.eval()
    oracle.eval()
    with torch.no_grad():
        assert torch.equal(no_att.predict(x), oracle.predict(x))


def test_no_cls_token_variant(tiny_backbone_cfg, tiny_fgd_cfg):
    model = build_variant("No_CLS_Token", tiny_backbone_cfg, tiny_fgd_cfg)
    assert model.shared.class_token is None
    tokens = model.forward_features(torch.randn(1, 3, 64, 64))
    assert tokens.shape == (1, 4, 64)  # N patches, no class slot
    assert model(torch.randn(2, 3, 64, 64)).shape == (2, 2)


def test_no_pos_emb_variant(tiny_backbone_cfg, tiny_fgd_cfg):
    model = build_variant("No_Pos_emb", tiny_backbone_cfg, tiny_fgd_cfg)
    assert model.shared.pos_encoding is None
    assert model(torch.randn(1, 3, 64, 64)).shape == (1, 2)


def test_hybrid3_uses_three_stages(tiny_backbone_cfg, tiny_fgd_cfg):
    model = build_variant("Hybrid3", tiny_backbone_cfg, tiny_fgd_cfg)
    assert len(model.decoders) == 3
    assert len(model.focus_blocks) == 3
    tokens = model.forward_features(torch.randn(1, 3, 64, 64))
    assert tokens.shape == (1, 17, 64)  # stage-3 edge 4 -> 16 patches + class token


def test_hybrid1_uses_eight_encoders(tiny_backbone_cfg, tiny_fgd_cfg):
    model = build_variant("Hybrid1", tiny_backbone_cfg, tiny_fgd_cfg)
    assert isinstance(model, StackedHybridTransformer)
    assert len(model.encoders) == 8
    assert model(torch.randn(1, 3, 64, 64)).shape == (1, 2)


def test_attention_swap_variants(tiny_backbone_cfg, tiny_fgd_cfg):
    from msht.attention import CBAMBlock, SEBlock

    se = build_variant("SE_ATT", tiny_backbone_cfg, tiny_fgd_cfg)
    cbam = build_variant("CBAM_ATT", tiny_backbone_cfg, tiny_fgd_cfg)
    assert all(isinstance(b.attention, SEBlock) for b in se.focus_blocks)
    assert all(isinstance(b.attention, CBAMBlock) for b in cbam.focus_blocks)


def test_variant_names_are_case_insensitive():
    assert resolve_variant("msht") == "MSHT"
    assert resolve_variant("no_cls_token") == "No_CLS_Token"


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, tiny_backbone_cfg, tiny_fgd_cfg):
    model = build_variant("MSHT", tiny_backbone_cfg, tiny_fgd_cfg, init_seed=3)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, {"epoch": 4})

    restored, meta = load_checkpoint(path)
    assert meta["variant"] == "MSHT"
    assert meta["epoch"] == 4
    x = torch.randn(2, 3, 64, 64)
    model.eval()
    restored.eval()
    with torch.no_grad():
        assert torch.equal(model.predict(x), restored.predict(x))


def test_checkpoint_config_mismatch_is_rejected(tmp_path, tiny_backbone_cfg, tiny_fgd_cfg):
    model = build_variant("MSHT", tiny_backbone_cfg, tiny_fgd_cfg, init_seed=0)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model)

    other_cfg = dataclasses.replace(tiny_fgd_cfg, ffn_hidden=128)
    other = build_variant("MSHT", tiny_backbone_cfg, other_cfg, init_seed=0)
    with pytest.raises(ValueError, match="configuration does not match"):
        load_checkpoint_into(other, path)

    wrong_variant = build_variant("Hybrid1", tiny_backbone_cfg, tiny_fgd_cfg, init_seed=0)
    with pytest.raises(ValueError, match="variant"):
        load_checkpoint_into(wrong_variant, path)
