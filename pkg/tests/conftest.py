import pytest

from _synth import write_corpus


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Session-wide synthetic digit corpus as IDX files: 14k train, 7k test."""
    root = tmp_path_factory.mktemp("idx")
    return write_corpus(root, n_train=14000, n_test=7000, seed=20240601)
