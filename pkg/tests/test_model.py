import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mmflow.numerics.autodiff as T
from mmflow.errors import ContractError, ShapeError
from mmflow.modality import Modality
from mmflow.model import ModelConfig, UnifiedDiT, rope_tables, tiny_config, tokenize, toy_config
from mmflow.model.layers import patch_positions, timestep_sinusoid
from mmflow.numerics.autodiff import Tape, Tensor, backward
from mmflow.numerics.rng import Rng
from mmflow.trainer import perturbed_model


def _inputs(cfg, B=2, seed=0, dtype=np.float64):
    r = Rng(seed)
    shape = (B,) + cfg.grid + (cfg.c_in,)
    return r.derive(0).normal(shape, dtype), r.derive(1).normal(shape, dtype)


def _fwd(model, r, m, mod=Modality.DEPTH, skip=False, t_r=0.3, t_m=0.7):
    B = r.shape[0]
    return model.forward(r, m, np.full(B, int(mod)), ["two objects moving right"] * B,
                         ["depth map"] * B, np.full(B, t_r), np.full(B, t_m), skip_blocks=skip)


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(grid=(8, 30, 32))
    with pytest.raises(ContractError):
        ModelConfig(d_model=130)
    cfg = toy_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert sum(cfg.rope_bands) == cfg.d_head and all(b % 2 == 0 for b in cfg.rope_bands)


def test_config_json_roundtrip(tmp_path):
    cfg = tiny_config(rgb_table_row=True)
    cfg.save(tmp_path / "m.json")
    assert ModelConfig.load(tmp_path / "m.json") == cfg


def test_tokenize_is_stable_and_bounded():
    ids = tokenize("Two objects moving RIGHT", 32)
    assert ids == tokenize("two objects moving right", 32)
    assert all(0 <= i < 32 for i in ids)


def test_sinusoid_shape_and_range():
    e = timestep_sinusoid(np.array([0.0, 500.0]), 12)
    assert e.shape == (2, 12)
    np.testing.assert_array_equal(e[0, :6], 1.0)
    np.testing.assert_array_equal(e[0, 6:], 0.0)


def test_output_shapes(tiny_model):
    cfg = tiny_model.config
    r, m = _inputs(cfg, B=3)
    v_r, v_m = _fwd(tiny_model, r, m)
    assert v_r.shape == r.shape and v_m.shape == m.shape
    v_only, none = tiny_model.forward(r, None, None, ["x"] * 3, None, np.full(3, 0.5))
    assert none is None and v_only.shape == r.shape


def test_stream_shape_mismatch_rejected(tiny_model):
    r, m = _inputs(tiny_model.config)
    with pytest.raises(ShapeError):
        _fwd(tiny_model, r, m[:1])
    with pytest.raises(ShapeError):
        tiny_model.forward(r[:, :, :4], None, None, ["a"] * 2, None, 0.5)


def test_unknown_modality_rejected(tiny_model):
    r, m = _inputs(tiny_model.config)
    with pytest.raises(ContractError):
        tiny_model.forward(r, m, np.array([1, 6]), ["a"] * 2, ["b"] * 2, 0.5, 0.5)


def test_predict_refuses_active_tape(tiny_model):
    r, m = _inputs(tiny_model.config)
    with Tape():
        with pytest.raises(ContractError):
            tiny_model.predict(r, m, np.array([1, 1]), ["a"] * 2, ["b"] * 2, 0.5, 0.5)


def test_unpatchify_inverts_patch_layout(tiny_model):
    cfg = tiny_model.config
    g = Rng(2).normal((2,) + cfg.grid + (cfg.c_in,), np.float64)
    pt, ph, pw = cfg.patch
    tp, hp, wp = cfg.patch_grid
    # Independent numpy patch extraction in (t, h, w) raster order.
    patches = np.stack([g[:, a * pt:(a + 1) * pt, b * ph:(b + 1) * ph, c * pw:(c + 1) * pw].reshape(2, -1)
                        for a in range(tp) for b in range(hp) for c in range(wp)], axis=1)
    np.testing.assert_array_equal(tiny_model.unpatchify(Tensor(patches)).data, g)


def test_adaln_zero_identity_at_init(tiny_model):
    r, m = _inputs(tiny_model.config)
    full = _fwd(tiny_model, r, m)
    skip = _fwd(tiny_model, r, m, skip=True)
    assert np.array_equal(full[0].data, skip[0].data) and np.array_equal(full[1].data, skip[1].data)


def test_perturbed_model_is_not_identity(tiny_cfg):
    model = perturbed_model(tiny_cfg)
    r, m = _inputs(tiny_cfg)
    assert not np.allclose(_fwd(model, r, m)[0].data, _fwd(model, r, m, skip=True)[0].data)


def test_other_heads_and_rows_are_never_read(tiny_cfg):
    model = perturbed_model(tiny_cfg)
    r, m = _inputs(tiny_cfg)
    ref = _fwd(model, r, m, Modality.DEPTH)
    for name in ("heads.w", "heads.b", "modality_table"):
        data = model.params[name].data
        keep = data.copy()
        poison = np.ones(len(data), dtype=bool)
        poison[[Modality.RGB, Modality.DEPTH] if name != "modality_table" else [Modality.DEPTH]] = False
        data[poison] = np.nan
        out = _fwd(model, r, m, Modality.DEPTH)
        model.params[name].data = keep
        assert np.array_equal(out[0].data, ref[0].data) and np.array_equal(out[1].data, ref[1].data)


def test_modality_rows_change_output(tiny_cfg):
    model = perturbed_model(tiny_cfg)
    r, m = _inputs(tiny_cfg)
    a = _fwd(model, r, m, Modality.DEPTH)[1].data
    b = _fwd(model, r, m, Modality.FLOW)[1].data
    assert not np.allclose(a, b)


def test_rgb_table_row_flag(tiny_cfg):
    off = perturbed_model(tiny_cfg)
    on = UnifiedDiT(tiny_config(rgb_table_row=True), dtype=np.float64,
                    params={k: Tensor(v.data.copy(), requires_grad=True) for k, v in off.params.items()})
    r, m = _inputs(tiny_cfg)
    assert not np.allclose(_fwd(off, r, m)[0].data, _fwd(on, r, m)[0].data)


def test_null_caption_and_dropout(tiny_model):
    null = tiny_model.text_embed(None).data
    assert np.array_equal(tiny_model.text_embed("two objects", drop=True).data, null)
    assert np.array_equal(tiny_model.text_embed("").data, null)
    ctx, bias = tiny_model._context(["two objects moving left", None])
    assert ctx.shape[:2] == (2, 4)
    assert (bias[1, ..., 1:] < -1e8).all() and bias[1, ..., 0] == 0


def _cross_attention_probe(model, ctx_shift):
    cfg = model.config
    B = 2
    h = Tensor(Rng(5).normal((2 * B, cfg.n_tokens, cfg.d_model), np.float64))
    ctx, bias = model._context(["two objects moving right", "one object moving up", "depth map", "optical flow"])
    return model._cross_attention(0, h, Tensor(ctx.data + ctx_shift), bias).data


def test_rgb_cross_attention_ignores_modality_prompts(tiny_cfg):
    model = perturbed_model(tiny_cfg)
    base = _cross_attention_probe(model, 0.0)
    shift = np.zeros((4, 4, tiny_cfg.text_dim))
    shift[2:] = 1e-3 * Rng(8).normal((2, 4, tiny_cfg.text_dim), np.float64)
    moved = _cross_attention_probe(model, shift)
    assert np.abs(moved[:2] - base[:2]).max() / 1e-3 < 1e-10
    assert np.abs(moved[2:] - base[2:]).max() > 0


def _logit(q, k, pq, pk, bands, off_q=0, off_k=0):
    cq, sq = rope_tables(pq[None], bands, off_q, dtype=np.float64)
    ck, sk = rope_tables(pk[None], bands, off_k, dtype=np.float64)
    rq = T.rotary_rotate_pairs(Tensor(q[None]), cq, sq).data[0]
    rk = T.rotary_rotate_pairs(Tensor(k[None]), ck, sk).data[0]
    return float(rq @ rk)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=9, max_size=9))
def test_rope_logits_depend_on_offsets_only(v):
    bands = toy_config().rope_bands
    dh = sum(bands)
    rs = np.random.default_rng(abs(sum(v)))
    q, k = rs.normal(size=dh), rs.normal(size=dh)
    p1, p2, d = np.array(v[:3]), np.array(v[3:6]), np.array(v[6:])
    assert abs(_logit(q, k, p1, p2, bands) - _logit(q, k, p1 + d, p2 + d, bands)) < 1e-9


def test_patch_positions_raster_order():
    pos = patch_positions((2, 2, 3))
    assert pos.shape == (12, 3)
    assert pos[:4].tolist() == [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 0]]
