import acceptance_log


def pytest_sessionstart(session):
    summary = acceptance_log.artifact_root() / "acceptance_summary.txt"
    if summary.exists():
        summary.unlink()


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(acceptance_log.format_line(criterion))
