import pytest

from ecapa2 import synth


@pytest.fixture(scope="session")
def corpus0():
    """Default 32-speaker synthetic corpus, seed 0."""
    return synth.generate_corpus(synth.SynthCorpusSpec(seed=0))


@pytest.fixture(scope="session")
def small_corpus():
    return synth.generate_corpus(synth.SynthCorpusSpec(
        num_speakers=6, utts_per_speaker=4, duration_s=(1.0, 1.5), held_out_speakers=2,
        trials_per_class=6, seed=3))
