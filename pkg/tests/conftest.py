import pytest

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def acceptance_record():
    """Tests in the acceptance suite report (criterion, outcome detail) here."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = ("PASS" if passed else "FAIL", detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        status, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{status}  {key}: {detail}")
