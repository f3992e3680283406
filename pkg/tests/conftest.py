import json
from pathlib import Path

import pytest

from corealloc.coalitional import PreemptiveGame
from corealloc.markets import load_system
from corealloc.preemptive import ResultsLedger

DATA = Path(__file__).resolve().parents[1] / "src" / "corealloc" / "data"
GOLDEN = Path(__file__).resolve().parent / "golden"


def data(*parts) -> Path:
    return DATA.joinpath(*parts)


def system(name: str):
    return load_system(data(name, "system.json"), data(name, "scenarios.json"))


@pytest.fixture(scope="session")
def three_area():
    return system("three_area")


@pytest.fixture(scope="session")
def three_area_ledger(tmp_path_factory):
    return ResultsLedger(tmp_path_factory.mktemp("ledger") / "three_area.json")


@pytest.fixture(scope="session")
def three_area_game(three_area, three_area_ledger):
    pg = PreemptiveGame(three_area, three_area_ledger)
    return pg, pg.expected()


def load_json(path):
    return json.loads(Path(path).read_text())
