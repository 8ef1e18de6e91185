import pytest

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    def _report(cid: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[cid] = (bool(ok), detail)
        print(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
