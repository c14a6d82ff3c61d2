import numpy as np
import pytest

from ecapa2 import tensor as T
from ecapa2.interpret import (AblationCurve, AttributionMap, Resnet2dStack, StandinConfig,
                              Tdnn1dStack, ablation_sweep, box_erf_oracle, build_analysis_standins,
                              compute_erf, erf_frequency_profile, load_standin, neuron_conductance)
from ecapa2.model import Ecapa2Config, Ecapa2Model, read_checkpoint, save_checkpoint
from ecapa2.nn import Module
from ecapa2.scoring import ScoringError, TrialSet
from ecapa2.tensor import GeometryError


def ones_config(**kw):
    base = dict(activation="linear", batchnorm=False, init="ones", freq_strides_2d=[],
                channels_2d=2, embedding_dim=4)
    base.update(kw)
    return StandinConfig(**base)


def box2d(f, t, layers, padding="zeros"):
    m = np.outer(box_erf_oracle(f, layers, f // 2, padding=padding),
                 box_erf_oracle(t, layers, t // 2, padding=padding))
    return m / m.max()


class TestOracle:
    def test_small_box_powers(self):
        np.testing.assert_array_equal(box_erf_oracle(7, 1, 3), [0, 0, 1, 1, 1, 0, 0])
        np.testing.assert_array_equal(box_erf_oracle(7, 2, 3), [0, 1, 2, 3, 2, 1, 0])

    def test_trinomial_coefficients(self):
        g = box_erf_oracle(41, 5, 20)
        want = np.polynomial.polynomial.polypow([1, 1, 1], 5)
        np.testing.assert_array_equal(g[15:26], want)


class TestErf:
    def test_single_conv_patch(self):
        cfg = StandinConfig(layers_2d=1, freq_strides_2d=[1], batchnorm=False, activation="linear",
                            input_bins=9)
        m = compute_erf(lambda s: Resnet2dStack(cfg, s), (9, 11), seeds=4)
        nz = np.argwhere(m.values > 0)
        assert nz.min(axis=0).tolist() == [3, 4] and nz.max(axis=0).tolist() == [5, 6]
        assert len(nz) == 9

    @pytest.mark.parametrize("layers", [1, 3, 6])
    def test_1d_all_ones_is_box_power(self, layers):
        cfg = ones_config(layers_1d=layers, input_bins=8)
        m = compute_erf(lambda s: Tdnn1dStack(cfg, 3, s), (8, 21), seeds=2)
        row = box_erf_oracle(21, layers, 10)
        want = np.tile(row / row.max(), (8, 1))
        assert np.abs(m.values - want).max() < 1e-12
        assert erf_frequency_profile(m)[1] == 1.0

    @pytest.mark.parametrize("layers,padding", [(2, "zeros"), (5, "zeros"), (4, "edge")])
    def test_2d_all_ones_is_box_product(self, layers, padding):
        cfg = ones_config(layers_2d=layers, input_bins=15, padding_mode=padding)
        m = compute_erf(lambda s: Resnet2dStack(cfg, s), (15, 13), seeds=1)
        assert np.abs(m.values - box2d(15, 13, layers, padding)).max() < 1e-12

    def test_symmetric_about_target(self):
        cfg = ones_config(layers_2d=6, input_bins=17)
        m = compute_erf(lambda s: Resnet2dStack(cfg, s), (17, 15), seeds=1).values
        np.testing.assert_array_equal(m, m[::-1])
        np.testing.assert_array_equal(m, m[:, ::-1])

    def test_uniformity_increases_with_depth(self):
        scores = []
        for layers in (2, 8, 16):
            cfg = ones_config(layers_2d=layers, input_bins=16)
            m = compute_erf(lambda s: Resnet2dStack(cfg, s), (16, 33), seeds=1)
            scores.append(erf_frequency_profile(m)[1])
        assert scores[0] < scores[1] < scores[2] < 1.0

    def test_head_makes_profile_uniform(self):
        cfg = ones_config(layers_2d=3, input_bins=16, head_1d=True, padding_mode="edge")
        m = compute_erf(lambda s: Resnet2dStack(cfg, s), (16, 15), seeds=1)
        assert erf_frequency_profile(m)[1] == 1.0

    @pytest.mark.parametrize("head", [False, True])
    def test_zero_outside_receptive_field(self, head):
        cfg = StandinConfig(input_bins=32, layers_2d=3, freq_strides_2d=[1, 2, 2], head_1d=head)
        m = compute_erf(lambda s: Resnet2dStack(cfg, s), (32, 25), seeds=3, target=(1, 3, 12)
                        if not head else (1, 12))
        rf = Resnet2dStack(cfg).receptive_field(m.target[1:], (32, 25))
        assert (m.values[~rf] == 0).all()
        assert (m.values[rf] > 0).mean() > 0.5

    def test_1d_receptive_field(self):
        cfg = StandinConfig(input_bins=10, layers_1d=2)
        m = compute_erf(lambda s: Tdnn1dStack(cfg, 4, s), (10, 20), seeds=3)
        rf = Tdnn1dStack(cfg, 4).receptive_field(m.target[1:], (10, 20))
        assert (m.values[~rf] == 0).all() and rf.sum() == 50

    def test_target_out_of_bounds(self):
        cfg = StandinConfig(input_bins=10, layers_1d=2)
        with pytest.raises(GeometryError):
            compute_erf(lambda s: Tdnn1dStack(cfg, 4, s), (10, 20), seeds=1, target=(0, 99))

    def test_ecapa2_prepool(self):
        cfg = Ecapa2Config(lfe_stages=[(1, 4, 2)], gfe_channels=8, res2net_scale=2,
                           cas_attention_dim=4, embedding_dim=4, input_bins=16, fwse_hidden=2,
                           striding_enabled=False)
        m = compute_erf(lambda s: Ecapa2Model(cfg, s), (16, 21), seeds=8)
        assert m.values.shape == (16, 21) and m.values.max() == 1.0
        assert m.values[:, 0].sum() < m.values[:, 10].sum()

    def test_profile_cases(self):
        prof, score = erf_frequency_profile(AttributionMap(np.ones((4, 5)), "erf_gradient", ()))
        assert score == 1.0 and (prof == 1).all()
        single = np.zeros((4, 5))
        single[1, 2] = 3.0
        assert erf_frequency_profile(AttributionMap(single, "erf_gradient", ()))[1] == 0.0

    def test_map_write(self, tmp_path):
        m = AttributionMap(np.arange(6.0).reshape(2, 3), "conductance", ("prepool", 0, 1), "abc")
        m.write(tmp_path / "m.csv", tmp_path / "m.pgm")
        assert (tmp_path / "m.csv").read_text().startswith("# kind=conductance target=prepool:0:1")
        assert (tmp_path / "m.pgm").exists()


class LinearNeuron(Module):
    """y = sum(w * x) exposed as a (N, 1, 1) pre-pooling layer."""

    def __init__(self, w):
        self.w = w

    def prepool(self, x):
        x = T.as_tensor(x)
        return T.reshape(T.tsum(x * self.w, axis=(1, 2)), (x.shape[0], 1, 1))

    def fingerprint(self):
        return "linear"


class TestConductance:
    def test_linear_closed_form(self):
        rng = np.random.default_rng(0)
        w, x = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        m = neuron_conductance(LinearNeuron(w), x, steps=50)
        np.testing.assert_allclose(m.values, w * x, rtol=1e-12, atol=1e-14)

    def test_baseline_equal_input(self):
        cfg = StandinConfig(input_bins=12, layers_2d=2, freq_strides_2d=[1, 2])
        x = np.random.default_rng(1).standard_normal((12, 9))
        m = neuron_conductance(Resnet2dStack(cfg, 0), x, baseline=x.copy(), steps=20)
        assert (m.values == 0).all()

    def test_completeness(self):
        cfg = StandinConfig(input_bins=12, layers_2d=2, freq_strides_2d=[1, 2])
        model = Resnet2dStack(cfg, 3)
        x = np.random.default_rng(2).standard_normal((12, 9))
        m, ref = neuron_conductance(model, x, steps=300, return_reference=True)
        assert abs(m.values.sum() - ref) <= 0.01 * abs(ref)
        assert model.training  # restored

    def test_output_through_neuron(self):
        # with a linear readout of the neuron, conductance is the readout weight times IG
        cfg = StandinConfig(input_bins=12, layers_2d=2, freq_strides_2d=[1, 2])
        model = Resnet2dStack(cfg, 4)
        x = np.random.default_rng(3).standard_normal((12, 9))
        target = (0, 3, 4)
        plain = neuron_conductance(model, x, target=target, steps=40)
        via, ref = neuron_conductance(model, x, target=target, steps=40, return_reference=True,
                                      output=lambda mdl, h: T.tsum(h * 2.5, axis=(1, 2, 3)))
        np.testing.assert_allclose(via.values, 2.5 * plain.values, rtol=1e-9, atol=1e-12)

    def test_bad_steps_and_shapes(self):
        model = LinearNeuron(np.ones((2, 3)))
        with pytest.raises(ValueError):
            neuron_conductance(model, np.ones((2, 3)), steps=0)
        with pytest.raises(T.ShapeError):
            neuron_conductance(model, np.ones((2, 3)), baseline=np.ones((2, 4)))


class TestStandins:
    def test_param_counts_match(self):
        tdnn, resnet = build_analysis_standins()
        assert abs(tdnn.num_parameters() / resnet.num_parameters() - 1) <= 0.1

    def test_shapes(self):
        tdnn, resnet = build_analysis_standins(StandinConfig(embedding_dim=8))
        x = np.random.default_rng(0).standard_normal((2, 80, 30))
        assert tdnn(x).shape == (2, 8) and resnet(x).shape == (2, 8)
        assert resnet.prepool(x).shape == (2, 16, 10, 30)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            StandinConfig(layers_2d=3)
        with pytest.raises(ValueError):
            StandinConfig.from_dict({"nope": 1})

    def test_checkpoint_round_trip(self, tmp_path):
        tdnn, resnet = build_analysis_standins(seed=2)
        for model, extra in ((tdnn, {"channels": tdnn.channels}), (resnet, {})):
            save_checkpoint(tmp_path / "m.ecp", model, extra=extra)
            back = load_standin(*read_checkpoint(tmp_path / "m.ecp"))
            assert type(back) is type(model)
            x = np.random.default_rng(0).standard_normal((1, 80, 20))
            np.testing.assert_allclose(back.eval()(x).data, model.eval()(x).data, rtol=1e-4, atol=1e-5)


@pytest.fixture(scope="module")
def ablation_setup(small_corpus):
    audio = {u.relpath: u.waveform for u in small_corpus.utterances}
    ts = TrialSet(small_corpus.trials, audio)
    _, resnet = build_analysis_standins(StandinConfig(embedding_dim=16), seed=0)
    return resnet, ts


class TestAblation:
    def test_size_zero_is_baseline_and_reproducible(self, ablation_setup):
        model, ts = ablation_setup
        a = ablation_sweep(model, ts, "freq_bins", [0, 8, 40], rng=3)
        b = ablation_sweep(model, ts, "freq_bins", [0, 8, 40], rng=3)
        assert a.points == b.points
        from ecapa2.model import embed
        from ecapa2.scoring import compute_eer, cosine_score
        e = {k: embed(w, model).vector for k, w in ts.audio.items()}
        s = [cosine_score(e[t.enroll], e[t.test]) for t in ts.trials]
        base = compute_eer(np.array(s), np.array([t.label for t in ts.trials]))[0]
        assert a.points[0][1] == base

    def test_time_axis_and_curve_io(self, ablation_setup, tmp_path):
        model, ts = ablation_setup
        c = ablation_sweep(model, ts, "time_frames", [0, 10], rng=0, repeats=2)
        c.write(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "mask_size,eer,stderr"
        assert all(0 <= e <= 100 for e in c.eers)

    def test_errors(self, ablation_setup):
        model, ts = ablation_setup
        with pytest.raises(ScoringError):
            ablation_sweep(model, TrialSet([], ts.audio), "freq_bins", [0])
        with pytest.raises(GeometryError):
            ablation_sweep(model, ts, "freq_bins", [81])
        with pytest.raises(ValueError):
            AblationCurve("freq_bins", [(4, 1.0, 0.0), (2, 1.0, 0.0)])
