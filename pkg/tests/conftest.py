import pytest
import torch

from capsule.catalog import ClassCatalog, generate_synthetic, ingest

torch.set_num_threads(1)

TOY_CLASSES = ("Normal", "Ulcer", "Polyp", "Worms")


@pytest.fixture(scope="session")
def toy_catalog():
    return ClassCatalog(TOY_CLASSES, "Normal")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, toy_catalog):
    """4 classes, 10 train / 4 val images each, 32 px."""
    root = tmp_path_factory.mktemp("small") / "data"
    counts = {c: 10 for c in TOY_CLASSES}
    generate_synthetic(toy_catalog, counts, 32, 11, root, val_counts={c: 4 for c in TOY_CLASSES})
    return root


@pytest.fixture(scope="session")
def small_manifest(small_dataset, toy_catalog):
    return ingest(small_dataset, toy_catalog)


_ACCEPTANCE: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion, reported in the terminal summary")


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("acceptance")
    if label is None:
        return
    if report.when == "call" or report.failed:
        _ACCEPTANCE[label] = "PASS" if report.passed else "FAIL"


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        item.user_properties.append(("acceptance", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{_ACCEPTANCE[label]}] {label}")
