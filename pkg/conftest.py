import sys
import os

sys.path.insert(0, os.path.dirname(__file__))


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running training and end-to-end checks"
    )
