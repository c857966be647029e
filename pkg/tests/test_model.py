import numpy as np
import pytest

from datr.attention import ConfigError, DaConfig, mhsa_reference
from datr.model import (
    TABLE5_STRUCTURES,
    Block,
    StageConfig,
    build_model,
    decoder_forward,
    encoder_forward,
    model_param_count,
    parse_structure,
    predict,
    upsample_logits,
    variant_config,
)
from datr.numkit import DimensionError, Rng, Tensor, grad_check, ops, parameter
from datr.numkit.nn import param_count
from datr.numkit.optim import AdamW


def tiny_config(num_classes=3, structure="ooos", pe_mode="rpe", window=3):
    """Four-stage model with a few thousand parameters."""
    cfg = variant_config("M", num_classes, window, pe_mode, structure=structure)
    stages = tuple(
        StageConfig(st.patch_k, st.patch_s, st.patch_p, 1, c, h, st.attn_kind, r, 2)
        for st, c, h, r in zip(cfg.stages, (4, 4, 8, 8), (1, 1, 2, 2), (2, 2, 1, 1))
    )
    return type(cfg)(cfg.variant, stages, 8, num_classes, cfg.da)


@pytest.fixture(scope="module")
def model_m():
    return build_model(variant_config("M"), Rng(0))


class TestParamCounts:
    @pytest.mark.parametrize("variant,target", [("M", 4.64e6), ("T", 14.72e6), ("S", 25.76e6)])
    def test_within_fifteen_percent(self, variant, target):
        count = model_param_count(build_model(variant_config(variant), Rng(0)))
        assert abs(count - target) / target <= 0.15, count

    def test_independent_of_resolution(self, model_m):
        before = model_param_count(model_m)
        for shape in ((1, 64, 128, 3), (1, 32, 32, 3)):
            predict(np.zeros(shape, np.float32), model_m)
        assert model_param_count(model_m) == before

    def test_tiny_model_is_small(self):
        assert param_count(build_model(tiny_config(), Rng(0), np.float64)) <= 5000


class TestConfig:
    def test_presets(self):
        cfg = variant_config("S")
        assert [s.depth for s in cfg.stages] == [3, 4, 6, 3]
        assert [s.heads for s in cfg.stages] == [1, 2, 5, 8]
        assert [s.esa_reduction for s in cfg.stages] == [8, 4, 2, 1]
        assert [(s.patch_k, s.patch_s, s.patch_p) for s in cfg.stages] == [(7, 4, 3)] + [(3, 2, 1)] * 3
        assert cfg.structure_mask == ("esa", "esa", "esa", "da") and cfg.da.window_h == 11

    def test_structure_strings(self):
        assert parse_structure("soso") == ("da", "esa", "da", "esa")
        for bad in ("ooo", "ooox", "OOOS"):
            with pytest.raises(ConfigError):
                parse_structure(bad)

    def test_bad_heads(self):
        with pytest.raises(ConfigError):
            StageConfig(3, 2, 1, 1, 10, 3)

    def test_round_trip_dict(self):
        cfg = variant_config("T", 7, 5, "ape", True, "osos")
        assert type(cfg).from_dict(cfg.to_dict()) == cfg

    def test_num_classes_minimum(self):
        with pytest.raises(ConfigError):
            variant_config("M", num_classes=1)


class TestShapes:
    def test_encoder_pyramid(self, model_m):
        feats = encoder_forward(np.zeros((1, 64, 128, 3), np.float32), model_m)
        assert [f.shape for f in feats] == [(1, 16, 32, 32), (1, 8, 16, 64), (1, 4, 8, 160), (1, 2, 4, 256)]

    def test_encoder_finite_and_f4_size(self, model_m):
        x = Rng(1).uniform((1, 128, 256, 3), 0, 1, np.float32)
        feats = encoder_forward(x, model_m)
        assert feats[3].shape[1:3] == (4, 8)
        assert all(np.isfinite(f.data).all() for f in feats)

    def test_decoder_output(self, model_m):
        feats = encoder_forward(np.zeros((2, 64, 64, 3), np.float32), model_m)
        logits, fused = decoder_forward(feats, model_m)
        assert logits.shape == (2, 16, 16, 5) and fused.shape == (2, 16, 16, 512)
        np.testing.assert_allclose(ops.softmax(logits, -1).data.sum(-1), 1.0, atol=1e-5)

    def test_pads_odd_sizes(self):
        m = build_model(tiny_config(), Rng(2))
        probs, labels = predict(np.zeros((1, 37, 50, 3), np.float32), m)
        assert probs.shape == (1, 37, 50, 3) and labels.shape == (1, 37, 50)

    def test_too_small(self):
        m = build_model(tiny_config(), Rng(2))
        with pytest.raises(DimensionError):
            encoder_forward(np.zeros((1, 16, 64, 3), np.float32), m)

    def test_upsample_crop(self):
        lg = Tensor(np.zeros((1, 10, 13, 2), np.float32))
        assert upsample_logits(lg, 37, 50).shape == (1, 37, 50, 2)


class TestBlocks:
    def test_zero_output_projections_give_identity(self):
        rng = Rng(3)
        for kind in ("esa", "da"):
            st = StageConfig(3, 2, 1, 1, 8, 2, kind, 2, 4)
            blk = Block(st, DaConfig(3, 3, 2, 4), rng, np.float64)
            for lin in (blk.attn.proj.o, blk.mlp.fc2):
                lin.weight.data[:] = 0
                lin.bias.data[:] = 0
            x = rng.normal((1, 5, 7, 8))
            np.testing.assert_array_equal(blk(Tensor(x)).data, x)

    def test_da_block_gradient(self):
        rng = Rng(4)
        st = StageConfig(3, 2, 1, 1, 4, 2, "da", 1, 2)
        blk = Block(st, DaConfig(3, 3, 2, 2), rng, np.float64)
        x = parameter(rng.normal((1, 4, 4, 4)))
        w = Tensor(rng.normal((1, 4, 4, 4)))
        params = [x, blk.attn.rpe, blk.norm1.gamma, blk.mlp.fc1.weight, blk.attn.proj.v.weight]
        assert grad_check(lambda: ops.sum(ops.mul(blk(x), w)), params) <= 1e-4

    def test_full_window_da_stage_equals_full_attention(self):
        """A DA block whose window covers the map attends like plain MHSA."""
        rng = Rng(5)
        st = StageConfig(3, 2, 1, 1, 8, 2, "da", 1, 2)
        blk = Block(st, DaConfig(9, 9, 2, 4), rng, np.float64)
        blk.attn.rpe.data[:] = 0
        x = rng.normal((1, 3, 4, 8))
        y = blk.norm1(Tensor(x))
        got = blk.attn(y).data.reshape(12, 8)
        ref = mhsa_reference(ops.reshape(y, (12, 8)), 2, blk.attn.proj).data
        np.testing.assert_allclose(got, ref, atol=1e-12)


class TestDecoder:
    def test_folded_equals_concat(self):
        rng = Rng(6)
        m = build_model(variant_config("M", 4), rng, np.float64)
        feats = encoder_forward(rng.uniform((1, 64, 96, 3)), m)
        np.testing.assert_allclose(m.decoder.fused(feats).data, m.decoder.fused_concat(feats).data,
                                   atol=1e-10)

    def test_folded_gradients_equal_concat(self):
        rng = Rng(7)
        m = build_model(tiny_config(), rng, np.float64)
        feats = [Tensor(rng.normal((1, 8 >> i, 8 >> i, c))) for i, c in enumerate((4, 4, 8, 8))]
        w = Tensor(rng.normal((1, 8, 8, 8)))
        grads = []
        for fn in (m.decoder.fused, m.decoder.fused_concat):
            m.zero_grad()
            ops.sum(ops.mul(fn(feats), w)).backward()
            grads.append({k: p.grad.copy() for k, p in m.decoder.named_parameters()
                          if not k.startswith("classifier")})
        for k in grads[0]:
            np.testing.assert_allclose(grads[0][k], grads[1][k], atol=1e-10, err_msg=k)


class TestEndToEnd:
    def test_tiny_model_gradient(self):
        rng = Rng(8)
        m = build_model(tiny_config(), rng, np.float64)
        for _, p in m.named_parameters():     # generic point, away from the tiny init
            p.data += rng.normal(p.shape, 0.0, 0.3)
        img = rng.uniform((1, 32, 32, 3))
        labels = rng.integers(0, 3, (1, 8, 8))

        def loss():
            logits, _ = m(Tensor(img))
            logp = ops.log(ops.softmax(logits, -1))
            return ops.scale(ops.sum(ops.pick(logp, labels)), -1.0 / 64)

        # a key bias shifts every logit of a query equally, so softmax makes its
        # gradient exactly zero; differences there are pure round-off
        named = list(m.named_parameters())
        key_bias = [p for n, p in named if n.endswith("attn.proj.k.bias")]
        others = [p for n, p in named if not n.endswith("attn.proj.k.bias")]
        assert len(others) > 40
        assert grad_check(loss, others, max_entries=6) <= 1e-4
        m.zero_grad()
        loss().backward()
        assert all(np.abs(p.grad).max() < 1e-12 for p in key_bias)

    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_loss(self, seed):
        rng = Rng(100 + seed)
        m = build_model(tiny_config(), rng, np.float64)
        img = rng.uniform((2, 32, 32, 3))
        labels = rng.integers(0, 3, (2, 8, 8))

        def loss():
            logits, _ = m(Tensor(img))
            return ops.scale(ops.sum(ops.pick(ops.log(ops.softmax(logits, -1)), labels)), -1.0 / 128)

        opt = AdamW(m.named_parameters(), lr=1e-4, weight_decay=0.0)
        before = loss()
        before.backward()
        opt.step()
        assert float(loss().data) < float(before.data)

    def test_predict_valid_and_deterministic(self, model_m):
        x = Rng(9).uniform((1, 64, 128, 3), 0, 1, np.float32)
        p1, l1 = predict(x, model_m)
        p2, l2 = predict(x, model_m)
        assert np.array_equal(p1, p2) and np.array_equal(l1, l2)
        assert l1.min() >= 0 and l1.max() < 5
        np.testing.assert_allclose(p1.sum(-1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("structure", TABLE5_STRUCTURES)
    def test_all_structures_build_and_run(self, structure):
        m = build_model(tiny_config(structure=structure), Rng(10))
        assert m.cfg.structure == structure
        probs, _ = predict(np.zeros((1, 32, 64, 3), np.float32), m)
        assert np.isfinite(probs).all()
