import pytest

# filled by test_acceptance.py: criterion number -> (passed, detail)
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
