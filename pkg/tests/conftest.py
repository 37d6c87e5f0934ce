import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(f, x, h=1e-5):
    """Numeric gradient of the scalar ``f`` at the float array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


SMALL_CORPUS = dict(n_train=12, n_val=4, n_test=4, height=32, width=32, object_size=12, max_speed=1.0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 32x32 corpus that trains in seconds."""
    from vidcap.data import Corpus, CorpusConfig, gen_corpus
    root = tmp_path_factory.mktemp("small_corpus")
    gen_corpus(root, CorpusConfig(**SMALL_CORPUS))
    return Corpus(root)


def small_model(vocab, variant="full", seed=0, **kw):
    from vidcap.encoder import EncoderConfig
    from vidcap.model import CaptionModel
    enc = EncoderConfig(divisor=16, input_size=(32, 32), fc_size=16)
    kw.setdefault("embed_size", 8)
    kw.setdefault("hidden_size", 16)
    kw.setdefault("attention_size", 8)
    return CaptionModel.create(vocab, enc, variant=variant, seed=seed, **kw)


def splits(corpus, n_train=None):
    from vidcap.training import Split
    tv, tr = corpus.load_split("train")
    vv, vr = corpus.load_split("val")
    n = len(tv) if n_train is None else n_train
    return Split(tv[:n], tr[:n]), Split(vv, vr)


ACCEPTANCE = []


def record_criterion(number, title, passed, detail):
    """Store one PASS/FAIL line; all lines are repeated in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} | {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
