import numpy as np
import pytest

from mmreward import backbone as bb
from mmreward.backbone import ModelConfig
from mmreward.data import CorpusSpec, SyntheticImage, TextPrompt, gen_synthetic_corpus
from mmreward.errors import CheckpointError, ConfigError, RegistryError, SequenceLengthError, ShapeError
from mmreward.model import RewardModel, load_checkpoint, save_checkpoint

from conftest import tiny_config


def _img(seed=0, h=16, w=16):
    return SyntheticImage(np.random.default_rng(seed).random((h, w, 3)).astype(np.float32))


def test_sixteen_visual_tokens(tiny_cfg):
    w = bb.init_weights(tiny_cfg, np.random.default_rng(0))
    assert bb.encode_image(_img(), w, tiny_cfg).shape == (16, tiny_cfg.d_model)
    assert ModelConfig(patch_size=8).n_visual == 4


def test_zero_image_zero_bias_gives_zero_tokens(tiny_cfg):
    w = bb.init_weights(tiny_cfg, np.random.default_rng(0))
    ev = bb.encode_image(np.zeros((16, 16, 3), np.float32), {"proj.W": w["proj.W"], "proj.b": 0 * w["proj.b"]},
                         tiny_cfg)
    assert not ev.any()


def test_tokens_match_per_patch_oracle():
    cfg = tiny_config(d_model=8)
    rng = np.random.default_rng(1)
    w = bb.init_weights(cfg, rng, np.float64)
    w["proj.b"] = rng.normal(size=cfg.d_model)
    img = _img(3)
    ev = bb.encode_image(img, w, cfg)
    p = cfg.patch_size
    k = 0
    for r in range(0, 16, p):
        for c in range(0, 16, p):
            patch = img.pixels[r:r + p, c:c + p, :].astype(np.float64).reshape(-1)
            want = [sum(w["proj.W"][o, i] * patch[i] for i in range(patch.size)) + w["proj.b"][o]
                    for o in range(cfg.d_model)]
            np.testing.assert_allclose(ev[k], want, rtol=1e-12, atol=1e-12)
            k += 1


def test_image_shape_checked(tiny_cfg):
    w = bb.init_weights(tiny_cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        bb.encode_image(np.zeros((15, 16, 3)), w, tiny_cfg)
    with pytest.raises(ShapeError):
        bb.patchify(np.zeros((16, 14, 3)), 4)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(lora_rank=0)
    with pytest.raises(ConfigError):
        ModelConfig(max_seq=20, max_prompt_len=8)
    c = ModelConfig()
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert c.config_hash() != ModelConfig(d_model=32).config_hash()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"width": 3})


def test_sequence_too_long(tiny_cfg):
    long = TextPrompt.from_text(" ".join(["red"] * 60))
    with pytest.raises(SequenceLengthError):
        bb.make_batch([long], [_img()], tiny_cfg)


def test_causality_text_change_leaves_prefix_bitwise(tiny_model):
    a = TextPrompt.from_text("two red squares")
    b = TextPrompt.from_text("two red rings")
    img = _img(4)
    ha = tiny_model.forward(a, img, "alignment")
    hb = tiny_model.forward(b, img, "alignment")
    n_v = tiny_model.config.n_visual
    for la, lb in zip(ha.layers, hb.layers):
        # positions before the changed token (visual tokens + first two words)
        assert np.array_equal(la[:n_v + 2], lb[:n_v + 2])
    assert not np.array_equal(ha.eos_hidden, hb.eos_hidden)
    np.testing.assert_array_equal(ha.visual_tokens, hb.visual_tokens)


def test_attention_rows_sum_to_one(tiny_cfg):
    m = RewardModel(tiny_cfg, seed=2, dtype=np.float64)
    batch = m.batch([TextPrompt.from_text("one blue ring")], [_img()])
    res = bb.forward(tiny_cfg, m.weights, batch)
    for P in res.attn:
        np.testing.assert_allclose(P.sum(-1), 1.0, atol=1e-12)
        assert np.all(np.triu(P[0, 0], 1) == 0)


def test_zero_b_adapter_matches_base(tiny_model):
    prompt, img = TextPrompt.from_text("three green dots"), _img(5)
    base = tiny_model.forward(prompt, img, None)
    # same projector as the body, LoRA B zero: bitwise equal to the bare body
    ad = tiny_model.forward(prompt, img, "alignment")
    for x, y in zip(base.layers, ad.layers):
        assert np.array_equal(x, y)


def test_padding_never_changes_eos_hidden(tiny_cfg):
    m = RewardModel(tiny_cfg, seed=0)
    short, long = TextPrompt.from_text("one red dot"), TextPrompt.from_text("two blue crosses and rings")
    img = _img(6)
    alone = bb.forward(tiny_cfg, m.weights, m.batch([short], [img]))
    padded_batch = m.batch([short, long], [img, img])
    padded = bb.forward(tiny_cfg, m.weights, padded_batch)
    e = int(padded_batch.eos_pos[0])
    for L in range(tiny_cfg.n_layers + 1):
        np.testing.assert_array_equal(alone.hidden[L][0, :e + 1], padded.hidden[L][0, :e + 1])


def _random_adapter(m, tag, seed=3):
    rng = np.random.default_rng(seed)
    for k, v in m.adapter(tag).lora.items():
        m.adapter(tag).params[k][...] = rng.normal(0, 0.3, v.shape)


def test_merge_matches_dynamic_adapter():
    cfg = tiny_config()
    m = RewardModel(cfg, seed=0, dtype=np.float64)
    m.add_perspective("alignment", seed=1)
    _random_adapter(m, "alignment")
    ad = m.adapter("alignment")
    batch = m.batch([TextPrompt.from_text("two red squares")], [_img(7)])
    dyn = bb.forward(cfg, m.weights, batch, projector=ad.projector, lora=ad.lora)
    merged_w = bb.merge_adapter(m.weights, ad.lora, cfg, "alignment")
    mer = bb.forward(cfg, merged_w, batch, projector=ad.projector)
    for x, y in zip(dyn.hidden, mer.hidden):
        assert np.max(np.abs(x - y)) <= 1e-6 * np.max(np.abs(x))
    with pytest.raises(ConfigError):
        bb.merge_adapter(merged_w, ad.lora, cfg, "alignment")


def test_zero_adapter_merge_keeps_weights(tiny_cfg):
    w = bb.init_weights(tiny_cfg, np.random.default_rng(0))
    lora = bb.init_lora(tiny_cfg, np.random.default_rng(1))
    merged = bb.merge_adapter(w, lora, tiny_cfg)
    for k in w:
        assert np.array_equal(w[k], merged[k])
    assert merged.merged == ("adapter",) and w.merged == ()


def test_merge_shape_mismatch(tiny_cfg):
    w = bb.init_weights(tiny_cfg, np.random.default_rng(0))
    lora = bb.init_lora(tiny_cfg, np.random.default_rng(1))
    lora["lora.L0.q.A"] = np.zeros((tiny_cfg.lora_rank, 3))
    with pytest.raises(ShapeError):
        bb.merge_adapter(w, lora, tiny_cfg)


def test_extract_hidden_pooling():
    layers = [np.full((1, 4), 2.5)]
    hs = bb.HiddenStates(layers, 0, layers[0][0], np.zeros((1, 4)), 0)
    np.testing.assert_array_equal(bb.extract_hidden(hs, 0, "eos"), bb.extract_hidden(hs, 0, "mean"))
    const = [np.full((5, 3), 0.7)]
    hs = bb.HiddenStates(const, 4, const[0][4], np.zeros((1, 3)), 0)
    np.testing.assert_allclose(bb.extract_hidden(hs, 0, "mean"), 0.7)
    with pytest.raises(IndexError):
        bb.extract_hidden(hs, 1)


def test_extract_hidden_layer_sweep(tiny_model):
    hs = tiny_model.forward(TextPrompt.from_text("one cyan ring"), _img(8), "alignment")
    for L in range(hs.n_layers + 1):
        v = bb.extract_hidden(hs, L)
        np.testing.assert_array_equal(v, hs.layers[L][hs.eos_position])
        others = [bb.extract_hidden(hs, j) for j in range(hs.n_layers + 1) if j != L]
        assert all(not np.array_equal(v, o) for o in others)
    assert hs.n_layers == tiny_model.config.n_layers


def test_registry_and_activation_reversible(tiny_model):
    prompt, img = TextPrompt.from_text("two green rings"), _img(9)
    before = tiny_model.forward(prompt, img, None)
    _random_adapter(tiny_model, "alignment")
    tiny_model.activate("alignment")
    assert tiny_model.registry.active == "alignment"
    active = tiny_model.forward(prompt, img)
    tiny_model.deactivate()
    after = tiny_model.forward(prompt, img)
    assert not np.array_equal(active.eos_hidden, before.eos_hidden)
    for x, y in zip(before.layers, after.layers):
        assert np.array_equal(x, y)
    with pytest.raises(RegistryError):
        tiny_model.activate("safety")
    with pytest.raises(RegistryError):
        tiny_model.forward(prompt, img, "fidelity")


def test_trainable_fraction_defaults():
    m = RewardModel(ModelConfig(), seed=0)
    m.add_perspective("alignment")
    counts = m.parameter_counts("alignment")
    assert 0 < counts["fraction"] < 0.15


def test_perspectives_are_independent(tiny_model):
    tiny_model.add_perspective("safety", seed=9)
    a, s = tiny_model.adapter("alignment"), tiny_model.adapter("safety")
    assert a.params["proj.W"] is not s.params["proj.W"]
    a.params["proj.W"][0, 0] += 1.0
    assert s.params["proj.W"][0, 0] != a.params["proj.W"][0, 0]
    assert tiny_model.weights["proj.W"][0, 0] != a.params["proj.W"][0, 0]


def test_checkpoint_round_trip(tmp_path, tiny_model):
    _random_adapter(tiny_model, "alignment")
    path = tmp_path / "m.npz"
    save_checkpoint(tiny_model, path)
    back = load_checkpoint(path, tiny_model.config)
    pairs, _ = gen_synthetic_corpus(0, 4, CorpusSpec())
    p, i = [x.prompt for x in pairs], [x.chosen for x in pairs]
    np.testing.assert_array_equal(tiny_model.score(p, i, "alignment"), back.score(p, i, "alignment"))


def test_checkpoint_hash_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.npz"
    save_checkpoint(tiny_model, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, tiny_config(d_model=8))
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")
