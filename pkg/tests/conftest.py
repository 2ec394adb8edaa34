import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# acceptance verdict lines, printed at the end of the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
