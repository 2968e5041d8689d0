import importlib.resources as ir
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dersim import network


def feeder_bytes(name: str) -> bytes:
    return (ir.files("dersim") / f"data/feeders/{name}.yaml").read_bytes()


@pytest.fixture(scope="session")
def twobus():
    return network.parse_network(feeder_bytes("twobus"))


@pytest.fixture(scope="session")
def sub11():
    return network.parse_network(feeder_bytes("sub11"))
