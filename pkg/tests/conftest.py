import pytest

_config = None


def pytest_configure(config):
    global _config
    _config = config


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    """One PASS/FAIL line per acceptance criterion."""
    if "test_acceptance" not in report.nodeid or _config is None:
        return
    reporter = _config.pluginmanager.getplugin("terminalreporter")
    if reporter is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        name = report.nodeid.split("::")[-1]
        reporter.write_line(f"{'PASS' if report.passed else 'FAIL'} {name}")
