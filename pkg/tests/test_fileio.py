import wave

import numpy as np
import pytest

from ecapa2.features import FeatureMap, Waveform
from ecapa2.fileio import (read_feature_csv, read_matrix_csv, read_pgm, read_rows_csv, read_trials,
                           read_wav, write_feature_csv, write_matrix_csv, write_pgm, write_rows_csv,
                           write_trials, write_wav)
from ecapa2.scoring import Trial


class TestWav:
    def test_round_trip_within_quantization(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, 1600)
        write_wav(tmp_path / "spk" / "a.wav", Waveform(x))
        back = read_wav(tmp_path / "spk" / "a.wav")
        assert back.speaker_id == "spk"
        assert np.abs(back.samples - x).max() <= 0.5 / 32768
        with wave.open(str(tmp_path / "spk" / "a.wav")) as fh:
            assert (fh.getnchannels(), fh.getsampwidth(), fh.getframerate()) == (1, 2, 16000)

    def test_stereo_averaged_and_resampled(self, tmp_path):
        pcm = np.array([[1000, 3000]] * 800, dtype="<i2")
        path = tmp_path / "s.wav"
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(8000)
            fh.writeframes(pcm.tobytes())
        w = read_wav(path)
        assert w.samples.size == 1600
        np.testing.assert_allclose(w.samples, 2000 / 32768)

    def test_rejects_8bit(self, tmp_path):
        path = tmp_path / "b.wav"
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(1)
            fh.setframerate(16000)
            fh.writeframes(bytes(100))
        with pytest.raises(ValueError):
            read_wav(path)


class TestCsv:
    def test_matrix_round_trip_is_exact(self, tmp_path):
        m = np.random.default_rng(1).standard_normal((4, 5))
        write_matrix_csv(tmp_path / "m.csv", m, {"kind": "erf", "model_hash": "ab"})
        back, meta = read_matrix_csv(tmp_path / "m.csv")
        np.testing.assert_array_equal(back, m)
        assert meta == {"kind": "erf", "model_hash": "ab"}

    def test_feature_round_trip(self, tmp_path):
        f = FeatureMap(np.random.default_rng(2).standard_normal((80, 7)), "mel80")
        write_feature_csv(tmp_path / "f.csv", f)
        g = read_feature_csv(tmp_path / "f.csv")
        assert g.kind == "mel80"
        np.testing.assert_array_equal(g.bins, f.bins)

    def test_rows(self, tmp_path):
        write_rows_csv(tmp_path / "r.csv", ["a", "b"], [(1, 0.1), (2, 0.25)])
        rows = read_rows_csv(tmp_path / "r.csv")
        assert rows == [{"a": "1", "b": "0.1"}, {"a": "2", "b": "0.25"}]


class TestPgm:
    def test_scaling_and_orientation(self, tmp_path):
        m = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 6.0]])
        write_pgm(tmp_path / "h.pgm", m)
        pix = read_pgm(tmp_path / "h.pgm")
        assert pix.shape == (2, 3)
        assert pix[0, 0] == 0 and pix[1, 2] == 255
        assert pix[1, 0] == round(3 / 6 * 255)

    def test_constant_map(self, tmp_path):
        write_pgm(tmp_path / "c.pgm", np.ones((2, 2)))
        assert (read_pgm(tmp_path / "c.pgm") == 0).all()


class TestTrials:
    def test_round_trip(self, tmp_path):
        trials = [Trial(1, "a/1.wav", "a/2.wav"), Trial(0, "a/1.wav", "b/1.wav")]
        write_trials(tmp_path / "t.txt", trials)
        assert read_trials(tmp_path / "t.txt") == trials

    @pytest.mark.parametrize("line", ["2 a b", "1 a", "1 a b c"])
    def test_malformed(self, tmp_path, line):
        (tmp_path / "t.txt").write_text(line + "\n")
        with pytest.raises(ValueError):
            read_trials(tmp_path / "t.txt")
