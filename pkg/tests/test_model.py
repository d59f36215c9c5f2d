import math

import numpy as np
import pytest

from gatefuse import model as M
from gatefuse.errors import ArtifactError, ConfigurationError, InputError
from gatefuse.fusion import fuse

from helpers import gelu_np, grad_check, layer_norm_np, model_config, small_task


@pytest.fixture(scope="module")
def task():
    return small_task(n=40, seed=1)


def _sub_episodes(task, n=4):
    return task.episodes[:n]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        M.ModelConfig(head="encoder")
    with pytest.raises(ConfigurationError):
        M.ModelConfig(vocab_ans=1)


def test_config_dict_round_trip(task):
    cfg = model_config(task.spec, "mlp-score", head="decoder")
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_head_gives_zero_logits(task):
    cfg = model_config(task.spec)
    p = M.init_params(cfg, 0)
    p["head.weight"][:] = 0.0
    logits, _ = M.forward_episode(task.episodes[0], p, cfg)
    np.testing.assert_array_equal(logits, np.zeros(4))


def test_identity_head_returns_pooled_feature(task):
    cfg = model_config(task.spec, d=4, n_heads=1)
    p = M.init_params(cfg, 0)
    p["head.weight"] = np.eye(4)
    out = M.forward(p, _sub_episodes(task), cfg)
    np.testing.assert_array_equal(out.logits.data, M.pooled_features(out.fusion).data)


def test_pooling_is_mean_over_visible_rows(task):
    cfg = model_config(task.spec)
    p = M.init_params(cfg, 0)
    out = M.forward(p, _sub_episodes(task), cfg)
    for b, lay in enumerate(out.fusion.packed.layouts):
        np.testing.assert_allclose(M.pooled_features(out.fusion).data[b],
                                   out.fusion.output.data[b, : lay.length].mean(axis=0), atol=1e-14)


def _rope_np(x, positions, base=10000.0):
    d = x.shape[-1]
    inv = base ** (-np.arange(0, d, 2) / d)
    th = positions[:, None] * inv
    out = np.empty_like(x)
    out[:, 0::2] = x[:, 0::2] * np.cos(th) - x[:, 1::2] * np.sin(th)
    out[:, 1::2] = x[:, 0::2] * np.sin(th) + x[:, 1::2] * np.cos(th)
    return out


def decoder_oracle_first_step(params, fused, cfg):
    """Logits of the single answer step: the begin-of-answer row attends to every fused row and itself."""
    seq = np.vstack([fused, params["head.answer_embed"][cfg.vocab_ans]])
    n, d = seq.shape
    heads = cfg.fusion.n_heads
    dh = d // heads
    pos = np.arange(n, dtype=float)
    q, k, v = seq @ params["head.attn.wq"], seq @ params["head.attn.wk"], seq @ params["head.attn.wv"]
    out = np.zeros(d)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh = _rope_np(q[:, sl], pos), _rope_np(k[:, sl], pos)
        s = kh @ qh[-1] / math.sqrt(dh)
        e = np.exp(s - s.max())
        out[sl] = (e / e.sum()) @ v[:, sl]
    eps = cfg.fusion.ln_eps
    x1 = layer_norm_np(seq[-1] + out @ params["head.attn.wo"], params["head.ln1.gamma"], params["head.ln1.beta"], eps)
    x2 = x1 + gelu_np(x1 @ params["head.ffn.w1"] + params["head.ffn.b1"]) @ params["head.ffn.w2"] + params["head.ffn.b2"]
    x2 = layer_norm_np(x2, params["head.ln2.gamma"], params["head.ln2.beta"], eps)
    return x2 @ params["head.out.weight"] + params["head.out.bias"]


@pytest.mark.parametrize("n_heads", [1, 2])
def test_decoder_single_step_matches_oracle(n_heads):
    task = small_task(n=10, seed=2, n_classes=3)
    cfg = model_config(task.spec, head="decoder", d=4, n_heads=n_heads)
    p = M.init_params(cfg, 3)
    for ep in task.episodes[:3]:
        logits, _ = M.forward_episode(ep, p, cfg)
        fused = fuse(p["embed.instruction"], M._samples([ep], cfg), p, cfg.fusion).output.data[0]
        assert logits.shape == (1, 3)
        np.testing.assert_allclose(logits[0], decoder_oracle_first_step(p, fused, cfg), rtol=0, atol=1e-12)


def test_decoder_causality(task):
    cfg = model_config(task.spec, head="decoder")
    p = M.init_params(cfg, 0)
    eps = _sub_episodes(task, 2)
    rng = np.random.default_rng(0)
    targets = rng.integers(0, 4, size=(2, 5))
    base = M.forward(p, eps, cfg, targets).logits.data
    for t in range(5):
        changed = targets.copy()
        changed[:, t] = (changed[:, t] + 1) % 4
        out = M.forward(p, eps, cfg, changed).logits.data
        np.testing.assert_array_equal(out[:, : t + 1], base[:, : t + 1])
        assert np.all(np.abs(out[:, t + 1 :] - base[:, t + 1 :]).max(axis=-1) > 0)


def test_loss_uniform_logits():
    assert M.loss(np.zeros((1, 4)), [2]).item() == pytest.approx(math.log(4), rel=1e-15)
    assert M.loss(np.zeros((1, 2)), [0]).item() == pytest.approx(math.log(2), rel=1e-15)


def test_loss_decreases_to_zero_with_confidence():
    values = [M.loss(np.array([[c, 0.0, 0.0]]), [0]).item() for c in (0.0, 1.0, 5.0, 20.0, 50.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] >= 0.0 and values[-1] < 1e-20


def test_loss_mean_over_positions():
    logits = np.random.default_rng(0).normal(size=(2, 3, 4))
    targets = np.array([[0, 1, 2], [3, 0, 1]])
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expect = -np.mean([lp[b, t, targets[b, t]] for b in range(2) for t in range(3)])
    assert M.loss(logits, targets).item() == pytest.approx(expect, rel=1e-14)


def test_loss_target_out_of_range():
    with pytest.raises(InputError):
        M.loss(np.zeros((1, 4)), [4])


def test_unknown_instruction_id(task):
    cfg = model_config(task.spec)
    p = M.init_params(cfg, 0)
    ep = task.episodes[0]
    bad = type(ep)(np.array([cfg.vocab_in]), ep.features, ep.answer, ep.informative)
    with pytest.raises(InputError):
        M.forward(p, [bad], cfg)


def test_unknown_answer_id_decoder(task):
    cfg = model_config(task.spec, head="decoder")
    with pytest.raises(InputError):
        M.forward(M.init_params(cfg, 0), _sub_episodes(task, 1), cfg, np.array([[7]]))


@pytest.mark.parametrize("head", ["classification", "decoder"])
@pytest.mark.parametrize("seed", range(2))
def test_model_gradients(head, seed):
    task = small_task(n=8, seed=seed, tokens_per_modality=(1, 3))
    cfg = model_config(task.spec, head=head)
    eps = task.episodes[:2]
    targets = M.episode_targets(eps, cfg)
    errs = grad_check(lambda p: M.loss(M.forward(p, eps, cfg).logits, targets), M.init_params(cfg, seed))
    assert max(errs.values()) < 1e-5, {k: v for k, v in errs.items() if v >= 1e-5}


def test_predict_shapes(task):
    for head in ("classification", "decoder"):
        cfg = model_config(task.spec, head=head)
        pred, _ = M.predict(M.init_params(cfg, 0), _sub_episodes(task), cfg)
        assert pred.shape == (4, 1)


def test_init_is_float32_representable(task):
    p = M.init_params(model_config(task.spec, head="decoder"), 0)
    for v in p.values():
        np.testing.assert_array_equal(v.astype(np.float32).astype(np.float64), v)


# --- checkpoints ---------------------------------------------------------------------

@pytest.mark.parametrize("head", ["classification", "decoder"])
def test_checkpoint_round_trip(tmp_path, task, head):
    cfg = model_config(task.spec, "mlp-score", head=head)
    p = M.init_params(cfg, 5)
    path = M.save_checkpoint(tmp_path / "ck.bin", p, cfg, {"note": "x"})
    q, cfg2, extra = M.load_checkpoint(path)
    assert cfg2 == cfg and extra == {"note": "x"}
    a = M.forward(p, _sub_episodes(task), cfg).logits.data
    b = M.forward(q, _sub_episodes(task), cfg2).logits.data
    np.testing.assert_allclose(b, a, rtol=1e-6)


def test_checkpoint_float64_params_within_float32_rounding(tmp_path, task):
    cfg = model_config(task.spec)
    p = {k: v + np.random.default_rng(0).normal(scale=1e-3, size=v.shape) for k, v in M.init_params(cfg, 0).items()}
    M.save_checkpoint(tmp_path / "ck.bin", p, cfg)
    q, _, _ = M.load_checkpoint(tmp_path / "ck.bin")
    a = M.forward(p, _sub_episodes(task), cfg).logits.data
    b = M.forward(q, _sub_episodes(task), cfg).logits.data
    assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-3)) < 1e-5


def test_checkpoint_header_is_text(tmp_path, task):
    cfg = model_config(task.spec)
    path = M.save_checkpoint(tmp_path / "ck.bin", M.init_params(cfg, 0), cfg)
    raw = path.read_bytes()
    assert raw.startswith(M.CHECKPOINT_MAGIC)
    header = raw.split(b"\n")[1].decode()
    assert '"format_version": 1' in header and '"dtype": "<f4"' in header


def test_checkpoint_truncated(tmp_path, task):
    cfg = model_config(task.spec)
    path = M.save_checkpoint(tmp_path / "ck.bin", M.init_params(cfg, 0), cfg)
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(ArtifactError, match="truncated"):
        M.load_checkpoint(path)


def test_checkpoint_bad_magic_and_missing(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello\n")
    with pytest.raises(ArtifactError):
        M.load_checkpoint(tmp_path / "x.bin")
    with pytest.raises(ArtifactError):
        M.load_checkpoint(tmp_path / "missing.bin")


def test_checkpoint_shape_mismatch_names_field(tmp_path, task):
    cfg = model_config(task.spec)
    path = M.save_checkpoint(tmp_path / "ck.bin", M.init_params(cfg, 0), cfg)
    other = model_config(task.spec, d=16)
    with pytest.raises(ArtifactError, match="embed.instruction"):
        M.load_checkpoint(path, other)
    wrong_variant = model_config(task.spec, "flamingo-tanh")
    with pytest.raises(ArtifactError, match="tanh_gate"):
        M.load_checkpoint(path, wrong_variant)
