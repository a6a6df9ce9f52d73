import pytest

from shardplan import presets, synth_profile


@pytest.fixture(scope="session")
def workstation():
    return presets.builtin_machine("workstation")


@pytest.fixture(scope="session")
def workstation_db(workstation):
    return synth_profile(workstation)


@pytest.fixture(scope="session")
def nemo8b():
    return presets.builtin_model("nemo8b")


@pytest.fixture(scope="session")
def qwen30b():
    return presets.builtin_model("qwen30b")
