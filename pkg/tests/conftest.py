import random

import pytest

from flowrag.datafiles import (
    fixture_data_dir,
    load_fixture_knowledge,
    load_paraphrase_bank,
)
from flowrag.synth import ParaphraseBank, SynthConfig, forge_corpus


@pytest.fixture(scope="session")
def knowledge():
    return load_fixture_knowledge()


@pytest.fixture(scope="session")
def bank(knowledge):
    return load_paraphrase_bank(fixture_data_dir(), knowledge)


@pytest.fixture(scope="session")
def identity_bank(knowledge):
    return ParaphraseBank.build(knowledge.charts.values(), knowledge.faqs.values())


@pytest.fixture(scope="session")
def car(knowledge):
    return knowledge.charts["car-no-start-toy"]


@pytest.fixture(scope="session")
def car_faqs(knowledge):
    return knowledge.faqs["car-no-start-toy"]


@pytest.fixture(scope="session")
def car_docs(knowledge):
    return knowledge.documents["car-no-start-toy"]


@pytest.fixture(scope="session")
def small_corpus(knowledge, bank):
    """~120 quick dialogs across the three fixture charts."""
    cfg = SynthConfig(outlines_per_chart=20, interchange_factor=1)
    return forge_corpus(
        list(knowledge.charts.values()), knowledge.faqs, bank, cfg, random.Random(5)
    )


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {name}: {outcome}", flush=True)
