from __future__ import annotations

import sys

import pytest

from deixis.schema import LoadedDataset, load_dataset
from deixis.synth import SceneConfig, generate_fixture_set


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory) -> tuple:
    """A reusable 60-scene fixture set: (dataset path, loaded samples)."""
    out = tmp_path_factory.mktemp("fixtures") / "scenes.json"
    generate_fixture_set(SceneConfig(seed=101), 60, out)
    loaded: LoadedDataset = load_dataset(out)
    assert not loaded.issues
    return out, loaded.samples


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Capture hides per-criterion output from passing tests; echo it here.
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
