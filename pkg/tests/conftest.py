import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance")
    order = sorted(mod.VERDICTS, key=lambda k: (int(k.rstrip("abc")), k))
    for key in order:
        terminalreporter.write_line(mod.VERDICTS[key])
