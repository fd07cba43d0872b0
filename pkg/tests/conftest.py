import sys

import pytest

from pxamr.gid import AGAS_LOCALITY
from pxamr.locality import Locality
from pxamr.runtime import LocalityId, Runtime, SchedulerPolicy


@pytest.fixture
def runtime_factory():
    made = []

    def make(kind="global", workers=1, index=0):
        rt = Runtime(SchedulerPolicy(kind, workers), LocalityId(index)).start()
        made.append(rt)
        return rt

    yield make
    for rt in made:
        rt.stop()


@pytest.fixture
def pair():
    """Locality 0 co-hosts the address server; locality 1 is a plain client."""
    a = Locality(0, workers=2, host_agas=True).start()
    b = Locality(1, workers=2, agas=a.endpoint).start()
    yield a, b
    b.stop()
    a.stop()


@pytest.fixture
def standalone():
    """A standalone address server and three localities, all in this process."""
    server = Locality(AGAS_LOCALITY, workers=2, host_agas=True).start()
    locs = [Locality(i, workers=2, agas=server.endpoint).start() for i in range(3)]
    yield server, locs
    for loc in locs:
        loc.stop()
    server.stop()



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
