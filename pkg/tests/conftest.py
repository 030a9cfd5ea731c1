def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running statistical or training test (deselect with -m 'not slow')"
    )
