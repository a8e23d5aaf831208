import pytest

from hierdx.config import DATA_DIR
from hierdx.taxonomy import DdxGraph, TaxonomyTree, load_ddx, load_taxonomy


@pytest.fixture(scope="session")
def tree() -> TaxonomyTree:
    return load_taxonomy(DATA_DIR / "taxonomy.json")


@pytest.fixture(scope="session")
def ddx(tree) -> DdxGraph:
    return load_ddx(DATA_DIR / "ddx.json", tree)


@pytest.fixture
def chain() -> TaxonomyTree:
    return TaxonomyTree(
        [
            {"label": "lesion", "malignancy": "malignant"},
            {"label": "melanoma", "parent": "lesion", "malignancy": "malignant"},
            {"label": "superficial spreading melanoma", "parent": "melanoma", "malignancy": "malignant"},
        ]
    )


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion and assert on it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
