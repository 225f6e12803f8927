import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gleason.core import LabelMask, SlideRecord

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def make_slide(codes, slide_id="s0", **kw) -> SlideRecord:
    return SlideRecord(slide_id, LabelMask(np.asarray(codes, dtype=np.int16)), **kw)


@pytest.fixture
def slide_factory():
    return make_slide


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    RESULTS = getattr(module, "RESULTS", None)
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        ok, title, detail = RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {title}: {detail}")
