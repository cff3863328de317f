import csv
import sys
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
FIXTURE_CSV = DATA / "drugs_fixture.csv"

sys.path.insert(0, str(Path(__file__).parent))


def fixture_smiles() -> list[str]:
    with FIXTURE_CSV.open(newline="") as fh:
        return [row["canonical_smiles"] for row in csv.DictReader(fh)]


@pytest.fixture(scope="session")
def fixture_csv() -> Path:
    return FIXTURE_CSV


@pytest.fixture(scope="session")
def corpus_smiles() -> list[str]:
    return fixture_smiles()
