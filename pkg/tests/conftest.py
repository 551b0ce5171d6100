import pytest
import torch

from protokg.encoding import HashEncoder
from protokg.kg_construction import MemoryChatClient
from protokg.model import Hyperparams
from protokg.pipeline import build_graph
from protokg.synthetic import CLINICAL_FIELDS, GENDERS, SyntheticSpec, generate_synthetic

torch.set_num_threads(1)

SMALL_SPEC = dict(categories=2, tags_per_category=3, records_per_tag=(8, 3, 3), keywords_per_tag=4,
                  background_vocab=30, seed=3)
SMALL_DIM = 16


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SyntheticSpec(**SMALL_SPEC))


@pytest.fixture(scope="session")
def small_encoder():
    return HashEncoder(SMALL_DIM, seed=1)


@pytest.fixture(scope="session")
def small_graph(small_data, small_encoder):
    return build_graph(small_data.corpus, MemoryChatClient(small_data.transcripts), small_encoder, 0.85)


@pytest.fixture
def small_hp():
    return Hyperparams(dim=SMALL_DIM, clinical_fields=CLINICAL_FIELDS, genders=GENDERS, lr=1e-2,
                       epochs=2, batch_size=8, seed=5)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
