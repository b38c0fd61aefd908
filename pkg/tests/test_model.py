import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from m2ae import autodiff as ad
from m2ae.errors import FormatError, MaskError, ShapeError
from m2ae.gradcheck import audit_problem
from m2ae.model import (Builder, MaskPlan, ModelConfig, decode_modality, embed_patches, encode, fingerprint,
                        init_params, load_checkpoint, merge_bottleneck_array, param_shapes, patchify, run,
                        sample_mask_plan, save_checkpoint, single_modal_forward, unpatchify)


def test_config_invariants_and_scales():
    assert ModelConfig().n_patches == 32
    big = ModelConfig.full_scale()
    assert (big.d_enc, big.enc_depth, big.dec_width, big.dec_depth, big.heads) == (768, 6, 256, 3, 8)
    with pytest.raises(ShapeError):
        ModelConfig(segment_len=100, patch_size=64)
    with pytest.raises(ShapeError):
        ModelConfig(d_enc=30, heads=4)


# -- patches ------------------------------------------------------------------

def test_patchify_examples():
    assert patchify(np.zeros(2048), 64).shape == (32, 64)
    np.testing.assert_array_equal(patchify(np.array([1, 2, 3, 4]), 2), [[1, 2], [3, 4]])
    with pytest.raises(ShapeError):
        patchify(np.zeros(10), 3)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_unpatchify_inverts_patchify(k, s, seed):
    x = np.random.default_rng(seed).normal(size=(2, k * s))
    assert np.array_equal(unpatchify(patchify(x, s)), x)


# -- embedding / encoder ------------------------------------------------------

def test_zero_projection_embeds_to_positional_table(tiny_cfg):
    params = init_params(tiny_cfg)
    params["ecg.embed.w"] = np.zeros_like(params["ecg.embed.w"])
    x = patchify(np.random.default_rng(0).normal(size=(1, 256)), 32)
    e = run(lambda b, p: embed_patches(b, p, "ecg"), params, tiny_cfg, x)
    np.testing.assert_array_equal(e[0], params["ecg.embed.pos"])


def test_identical_patches_differ_by_positional_rows(tiny_cfg):
    params = init_params(tiny_cfg)
    x = np.tile(np.random.default_rng(1).normal(size=32), (1, 8)).reshape(1, 8, 32)
    e = run(lambda b, p: embed_patches(b, p, "ppg"), params, tiny_cfg, x)[0]
    pos = params["ppg.embed.pos"]
    np.testing.assert_allclose(e[3] - e[5], pos[3] - pos[5], atol=1e-12)


def test_encoder_shapes_determinism_and_position_sensitivity():
    cfg = ModelConfig()
    signal = np.tile(np.random.default_rng(2).normal(size=64), 32)
    for seed in range(20):
        z = encode(init_params(cfg, seed=seed), cfg, signal, "ecg")[0]
        assert z.shape == (32, 64)
        # every patch is identical, only the positional rows tell them apart
        assert len({r.tobytes() for r in z}) == 32
    params = init_params(cfg)
    assert np.array_equal(encode(params, cfg, signal, "ppg"), encode(params, cfg, signal, "ppg"))


# -- mask plans and merge -------------------------------------------------------

def test_mask_plan_examples():
    p = sample_mask_plan(32, 0.5, seed=0)
    assert len(p.M) == len(p.U) == 16 and set(p.U) | set(p.M) == set(range(32))
    assert len(sample_mask_plan(4, 0.25, seed=1).M) == 1
    assert sample_mask_plan(32, 0.37, seed=7) == sample_mask_plan(32, 0.37, seed=7)
    assert len(sample_mask_plan(10, 0.25, seed=0).M) == 3  # 2.5 rounds away from zero
    for bad in (0.05, 0.95):
        with pytest.raises(MaskError):
            sample_mask_plan(32, bad, seed=0)


def test_mask_plan_must_partition():
    with pytest.raises(MaskError):
        MaskPlan(4, (0, 1), (1, 2, 3))
    with pytest.raises(MaskError):
        MaskPlan(4, (0,), (1, 2))
    np.testing.assert_array_equal(MaskPlan(4, (2, 0), (1, 3)).visible_mask, [1, 0, 1, 0])


def test_merge_examples():
    rng = np.random.default_rng(0)
    ze, zp = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    zc = merge_bottleneck_array(ze, zp, MaskPlan(4, (0, 2), (1, 3)))
    np.testing.assert_array_equal(zc[[0, 2]], ze[[0, 2]])
    np.testing.assert_array_equal(zc[[1, 3]], zp[[1, 3]])
    np.testing.assert_array_equal(merge_bottleneck_array(ze, zp, MaskPlan(4, (0, 1, 2, 3), ())), ze)
    for bits in itertools.product((0, 1), repeat=4):
        plan = MaskPlan(4, tuple(i for i in range(4) if bits[i]), tuple(i for i in range(4) if not bits[i]))
        np.testing.assert_array_equal(merge_bottleneck_array(ze, ze, plan), ze)
    with pytest.raises(MaskError):
        merge_bottleneck_array(ze, zp[:3], MaskPlan(4, (0,), (1, 2, 3)))


# -- decoder / single-modal path ----------------------------------------------

def test_decoder_output_shape_and_determinism(tiny_cfg):
    params = init_params(tiny_cfg)
    z = np.random.default_rng(3).normal(size=(2, 8, 16))

    def graph(b, zz):
        return decode_modality(b, zz, "ecg")

    a = run(graph, params, tiny_cfg, z)
    assert a.shape == (2, 8, 32)
    assert np.array_equal(a, run(graph, params, tiny_cfg, z))


def test_single_modal_encoder_sees_only_visible_rows():
    cfg = ModelConfig()
    params = init_params(cfg, modalities=("ecg",), mask_tokens=True)
    x = np.random.default_rng(4).normal(size=2048)
    z, rec, plan = single_modal_forward(params, cfg, x, "ecg", r_m=0.5, seed=3)
    assert z.shape == (1, 16, 64) and rec.shape == (1, 32, 64) and len(plan.U) == 16
    z2, rec2, plan2 = single_modal_forward(params, cfg, x, "ecg", r_m=0.5, seed=3)
    assert plan2 == plan and np.array_equal(rec2, rec)
    with pytest.raises(MaskError):
        single_modal_forward(params, cfg, x, "ecg", r_m=0.0)


def test_mask_token_reaches_the_reconstruction(tiny_cfg):
    params = init_params(tiny_cfg, modalities=("ppg",), mask_tokens=True)
    x = np.random.default_rng(5).normal(size=256)
    _, base, plan = single_modal_forward(params, tiny_cfg, x, "ppg", seed=1)
    bumped = dict(params)
    # a uniform shift would vanish in the row normalisation, so perturb per feature
    bumped["ppg.dec.mask_token"] = params["ppg.dec.mask_token"] + np.random.default_rng(0).normal(size=8)
    _, moved, _ = single_modal_forward(bumped, tiny_cfg, x, "ppg", seed=1)
    assert not np.allclose(base[:, list(plan.M)], moved[:, list(plan.M)])
    assert "ecg.dec.mask_token" not in init_params(tiny_cfg)


# -- fingerprints -------------------------------------------------------------

def test_fingerprint_examples():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(fingerprint(np.tile(v, (5, 1))), v)
    np.testing.assert_allclose(fingerprint(np.eye(6)), np.full(6, 1 / 6))
    z = np.random.default_rng(6).normal(size=(7, 4))
    np.testing.assert_allclose(fingerprint(z[::-1]), fingerprint(z), atol=1e-15)


# -- parameters and checkpoints -----------------------------------------------

def test_no_dead_parameters_at_desk_scale():
    cfg = ModelConfig()
    root, bindings, names = audit_problem(cfg, seed=0, batch_size=4)
    grads = ad.Tape(root, bindings).backward(names)
    dead = [n for n in names if not np.any(grads[n] != 0)]
    assert not dead
    assert set(names) == set(param_shapes(cfg))


def test_checkpoint_round_trip_and_errors(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, seed=2)
    path = tmp_path / "m.m2ck"
    save_checkpoint(path, tiny_cfg, params)
    cfg, back = load_checkpoint(path)
    assert cfg == tiny_cfg and list(back) == list(params)
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)
    raw = path.read_bytes()
    (tmp_path / "bad.m2ck").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.m2ck").write_bytes(raw[:-3])
    (tmp_path / "ver.m2ck").write_bytes(raw[:4] + b"\x07\x00" + raw[6:])
    for name in ("bad", "short", "ver"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / f"{name}.m2ck")


def test_builder_reuses_leaves_and_varies_dropout_seeds(tiny_cfg):
    b = Builder(tiny_cfg, train=True, seed=1)
    assert b.p("ecg.embed.w") is b.p("ecg.embed.w")
    x = ad.const(np.ones((4, 8)))
    m1, m2 = ad.evaluate(b.dropout(x), {}), ad.evaluate(b.dropout(x), {})
    assert not np.array_equal(m1, m2)
