import json
import os
import time

import pytest

from opaqpipe.cli import main

RESULTS: list[tuple[int, bool, str]] = []

FULL_STEPS = [["gen-data"], ["train-opacifier"], ["train-mrm"], ["train-depth"]]
for _mode in ("opacify", "passthrough", "solid-color"):
    FULL_STEPS += [["run-pipeline", "--set", f"pipeline_mode={_mode}"],
                   ["eval", "--set", f"pipeline_mode={_mode}"]]
FULL_STEPS.append(["report"])


def run_full(workdir, extra=()) -> dict:
    """Run every CLI stage into ``workdir``; returns seconds per step."""
    timings = {}
    for step in FULL_STEPS:
        t0 = time.perf_counter()
        rc = main(step + ["--set", f"workdir={workdir}", *extra])
        if rc != 0:
            raise RuntimeError(f"{' '.join(step)} exited {rc}")
        timings[" ".join(step)] = time.perf_counter() - t0
    with open(os.path.join(workdir, "timings.json"), "w") as fh:
        json.dump(timings, fh, indent=1)
    return timings


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """Default-config end-to-end run.  OPAQPIPE_ACCEPT_DIR reuses a finished one."""
    wd = os.environ.get("OPAQPIPE_ACCEPT_DIR")
    if wd and os.path.exists(os.path.join(wd, "timings.json")):
        with open(os.path.join(wd, "timings.json")) as fh:
            return wd, json.load(fh)
    wd = wd or str(tmp_path_factory.mktemp("full"))
    return wd, run_full(wd)


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> bool:
        RESULTS.append((n, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(RESULTS):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
