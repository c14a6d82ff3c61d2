import numpy as np
import pytest

from ecapa2 import tensor as T
from ecapa2.features import FeatureError, Waveform
from ecapa2.model import (CASPooling, Ecapa2Config, Ecapa2Model, Res2NetConv1d, embed, geometry,
                          load_model, read_checkpoint, save_checkpoint)
from ecapa2.nn import BatchNorm, Conv1d, Conv2d, Linear, Module, l2_normalize
from ecapa2.tensor import Tensor, numerical_gradient


def micro_config(**kw):
    base = dict(lfe_stages=[(1, 2, 2)], gfe_channels=4, res2net_scale=2, cas_attention_dim=3,
                embedding_dim=3, input_bins=8, fwse_hidden=2)
    base.update(kw)
    return Ecapa2Config(**base)


def toy_config(**kw):
    base = dict(lfe_stages=[(1, 4, 2), (1, 8, 2)], gfe_channels=16, res2net_scale=4,
                cas_attention_dim=8, embedding_dim=12, input_bins=80, fwse_hidden=8)
    base.update(kw)
    return Ecapa2Config(**base)


class TestModule:
    def test_parameter_names_are_stable(self):
        a = Ecapa2Model(micro_config(), seed=0)
        b = Ecapa2Model(micro_config(), seed=1)
        assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
        assert "blocks.0.conv1.weight" in dict(a.named_parameters())

    def test_state_dict_round_trip(self):
        a = Ecapa2Model(micro_config(), seed=0)
        b = Ecapa2Model(micro_config(), seed=1)
        b.load_state_dict(a.state_dict())
        assert a.fingerprint() == b.fingerprint()

    def test_missing_state_key(self):
        m = Ecapa2Model(micro_config())
        state = m.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(KeyError):
            m.load_state_dict(state)

    def test_train_eval_propagates(self):
        m = Ecapa2Model(micro_config())
        m.eval()
        assert not any(b.training for b in m.blocks)
        m.train()
        assert m.gfe.norms[0].training

    def test_batchnorm_buffers_are_in_state(self):
        m = Ecapa2Model(micro_config())
        assert any(k.endswith("running_var") for k in m.state_dict())

    def test_l2_normalize(self):
        x = l2_normalize(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(x.data, [[0.6, 0.8]])


class TestLayers:
    def test_conv2d_default_padding_keeps_size(self):
        conv = Conv2d(1, 2, 3, rng=np.random.default_rng(0))
        assert conv(np.zeros((1, 1, 5, 7))).shape == (1, 2, 5, 7)

    def test_conv2d_edge_padding_constant_input(self):
        conv = Conv2d(1, 1, 3, padding_mode="edge")
        conv.weight.data = np.ones((1, 1, 3, 3))
        np.testing.assert_allclose(conv(np.full((1, 1, 4, 4), 2.0)).data, 18.0)

    def test_linear_matches_numpy(self):
        lin = Linear(3, 2, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((4, 3))
        np.testing.assert_allclose(lin(x).data, x @ lin.weight.data.T + lin.bias.data)

    def test_res2net_scale_one_is_plain_conv(self):
        rng = np.random.default_rng(0)
        block = Res2NetConv1d(6, 1, 3, rng=rng)
        conv = Conv1d(6, 6, 3)
        conv.weight.data = block.convs[0].weight.data.copy()
        x = rng.standard_normal((2, 6, 9))
        assert np.abs(block(x).data - conv(x).data).max() <= 1e-9

    def test_res2net_hierarchy(self):
        rng = np.random.default_rng(1)
        block = Res2NetConv1d(4, 2, 3, rng=rng)
        x = rng.standard_normal((1, 4, 5))
        y1 = T.conv1d(x[:, :2], block.convs[0].weight.data, padding=1).data
        y2 = T.conv1d(x[:, 2:] + y1, block.convs[1].weight.data, padding=1).data
        np.testing.assert_allclose(block(x).data, np.concatenate([y1, y2], axis=1), atol=1e-12)

    def test_res2net_rejects_indivisible(self):
        with pytest.raises(ValueError):
            Res2NetConv1d(6, 4)

    def test_cas_uniform_attention_is_statistics_pooling(self):
        rng = np.random.default_rng(2)
        pool = CASPooling(5, 4, rng)
        pool.attn2.weight.data[:] = 0.0
        pool.attn2.bias.data[:] = 0.0
        h = rng.standard_normal((3, 5, 11))
        out = pool(h).data
        ref = np.concatenate([h.mean(axis=-1), np.sqrt(h.var(axis=-1) + pool.eps)], axis=1)
        assert np.abs(out - ref).max() < 1e-9

    def test_cas_attention_sums_to_one_per_channel(self):
        rng = np.random.default_rng(3)
        pool = CASPooling(4, 3, rng)
        alpha = pool.attention(Tensor(rng.standard_normal((2, 4, 7)))).data
        np.testing.assert_allclose(alpha.sum(axis=-1), 1.0)

    def test_cas_needs_two_frames(self):
        pool = CASPooling(2, 2, np.random.default_rng(0))
        with pytest.raises(T.ShapeError):
            pool(np.zeros((1, 2, 1)))

    def test_fwse_gates_per_bin(self):
        m = Ecapa2Model(micro_config(), seed=0)
        fw = m.blocks[0].fwse
        x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 4, 5)))
        gates = fw.gates(x).data
        assert gates.shape == (2, 4)
        assert ((gates > 0) & (gates < 1)).all()
        np.testing.assert_allclose(fw(x).data, x.data * gates[:, None, :, None])


class TestEcapa2:
    @pytest.mark.parametrize("frames", [2, 7, 40])
    @pytest.mark.parametrize("cfg", [toy_config(), toy_config(striding_enabled=False),
                                     toy_config(gfe_variant="none"), toy_config(gfe_variant="small"),
                                     toy_config(gfe_variant="big")])
    def test_shapes_match_geometry_oracle(self, cfg, frames):
        m = Ecapa2Model(cfg)
        geo = geometry(cfg, frames)
        x = np.random.default_rng(0).standard_normal((2, cfg.input_bins, frames))
        h = m.local_features(x)
        assert h.shape[1:] == geo[list(geo)[-5]]
        assert m.prepool(x).shape[1:] == geo["gfe"]
        assert m(x).shape == (2,) + geo["embedding"]

    def test_default_config_is_full_size(self):
        cfg = Ecapa2Config()
        assert geometry(cfg, 200)["embedding"] == (192,)
        assert cfg.input_bins == 256

    def test_input_layouts(self):
        m = Ecapa2Model(micro_config()).eval()
        x = np.random.default_rng(0).standard_normal((8, 6))
        a = m(x).data
        b = m(x[None]).data
        c = m(x[None, None]).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_wrong_bins(self):
        with pytest.raises(T.ShapeError):
            Ecapa2Model(micro_config())(np.zeros((1, 9, 5)))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            Ecapa2Config(lfe_stages=[(1, 4, 3)])
        with pytest.raises(ValueError):
            Ecapa2Config(gfe_channels=10, res2net_scale=4)
        with pytest.raises(ValueError):
            Ecapa2Config.from_dict({"bogus": 1})

    def test_seeded_init_is_deterministic(self):
        assert Ecapa2Model(toy_config(), 3).fingerprint() == Ecapa2Model(toy_config(), 3).fingerprint()
        assert Ecapa2Model(toy_config(), 3).fingerprint() != Ecapa2Model(toy_config(), 4).fingerprint()

    def test_end_to_end_gradient(self):
        """Whole micro-model against central differences, BN in training mode."""
        for seed in range(20):
            m = Ecapa2Model(micro_config(), seed=seed)
            rng = np.random.default_rng([seed, 9])
            x = rng.standard_normal((2, 8, 6))
            r = rng.standard_normal((2, 3))
            params = m.parameters()
            saved = [{k: v.copy() for k, v in m.named_buffers()}]

            def loss_value(*arrays):
                for p, a in zip(params, arrays):
                    p.data = a
                for k, v in m.named_buffers():
                    v[...] = saved[0][k]
                with T.no_grad():
                    return float(np.sum(m(x).data * r))

            originals = [p.data.copy() for p in params]
            numeric = numerical_gradient(loss_value, originals, h=1e-6)
            for p, a in zip(params, originals):
                p.data = a.copy()
                p.grad = None
            for k, v in m.named_buffers():
                v[...] = saved[0][k]
            T.tsum(m(x) * r).backward()
            analytic = np.concatenate([p.grad.ravel() for p in params])
            num = np.concatenate([g.ravel() for g in numeric])
            err = np.abs(analytic - num).max() / np.abs(num).max()
            assert err < 1e-4, f"seed {seed}: rel err {err:.2e}"


class TestCheckpoint:
    def test_round_trip_within_float32(self, tmp_path):
        m = Ecapa2Model(toy_config(), seed=1)
        m.blocks[0].bn1.running_mean[:] = 0.25
        path = tmp_path / "m.ecp"
        save_checkpoint(path, m, extra={"note": "x"}, tensors={"classifier.W": np.ones((2, 3))})
        loaded, header, extra = load_model(path)
        assert header["extra"] == {"note": "x"}
        np.testing.assert_array_equal(extra["classifier.W"], np.ones((2, 3)))
        for k, v in m.state_dict().items():
            np.testing.assert_allclose(loaded.state_dict()[k], v, rtol=2 ** -23, atol=1e-30)
        assert not loaded.training

    def test_layout(self, tmp_path):
        import json
        import struct
        m = Ecapa2Model(micro_config())
        path = tmp_path / "m.ecp"
        save_checkpoint(path, m)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + hlen])
        assert header["dtype"] == "float32-le" and header["format_version"] == 1
        total = sum(e["nbytes"] for e in header["tensors"])
        assert len(raw) == 8 + hlen + total
        names = [e["name"] for e in header["tensors"]]
        assert names == sorted(names)

    def test_bytes_are_deterministic(self, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(tmp_path / name, Ecapa2Model(micro_config(), seed=5))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ecp"
        save_checkpoint(path, Ecapa2Model(micro_config()))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            read_checkpoint(path)


class TestEmbed:
    def test_waveform_embedding_is_deterministic(self):
        m = Ecapa2Model(toy_config(), seed=0)
        w = Waveform(np.random.default_rng(0).uniform(-0.1, 0.1, 16000))
        a, b = embed(w, m), embed(w, m)
        np.testing.assert_array_equal(a.vector, b.vector)
        assert a.vector.shape == (12,)
        assert a.duration_s == pytest.approx(1.0, abs=0.01)
        assert m.training  # restored

    def test_too_short(self):
        m = Ecapa2Model(toy_config())
        with pytest.raises(FeatureError):
            embed(Waveform(np.zeros(7000)), m)

    def test_half_second_is_accepted(self):
        m = Ecapa2Model(toy_config())
        v = embed(Waveform(np.random.default_rng(1).uniform(-0.1, 0.1, 8000)), m)
        assert np.isfinite(v.vector).all()
