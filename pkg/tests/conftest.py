"""Shared pytest plumbing.

The acceptance tests append one line per criterion to ACCEPTANCE_CHECKLIST;
echoing them in the terminal summary keeps the checklist visible even when
every test passes and pytest swallows per-test stdout.
"""

ACCEPTANCE_CHECKLIST: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_CHECKLIST:
        terminalreporter.section("acceptance checklist")
        for line in ACCEPTANCE_CHECKLIST:
            terminalreporter.write_line(line)
