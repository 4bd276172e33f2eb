import pytest

from lutforge import rtl, zoo


@pytest.fixture(scope="session")
def desk_models():
    """All desk models trained briefly with seed 0: name -> (model, TrainResult)."""
    return {name: zoo.train_desk_model(name, seed=0, epochs=4) for name in zoo.DESK_MODELS}


@pytest.fixture(scope="session")
def verilator():
    tool = rtl.find_verilator()
    if tool is None:
        pytest.skip("no Verilator installation available")
    return tool
