"""Shared fixtures: compiled stub app, fake MPI launcher, platform helpers."""

import shutil
import subprocess
import textwrap

import pytest

from dynens.app import STUB_APP_SOURCE
from dynens.resources import Assignment, AssignedNode, PlatformSpec


@pytest.fixture(scope="session")
def stub_app(tmp_path_factory):
    """Compile the bundled stand-in simulation once per session."""
    cc = shutil.which("cc") or shutil.which("gcc")
    if cc is None:
        pytest.skip("no C compiler available")
    d = tmp_path_factory.mktemp("stub_build")
    exe = d / "forces_stub"
    subprocess.run(
        [cc, "-O1", "-o", str(exe), STUB_APP_SOURCE, "-lm"],
        check=True, capture_output=True,
    )
    return str(exe)


@pytest.fixture(scope="session")
def fake_mpiexec(tmp_path_factory):
    """Launcher shim speaking the mpich grammar: eats -n/--ppn/--options,
    then execs the application. Keeps live tests off real MPI health."""
    d = tmp_path_factory.mktemp("shim")
    sh = d / "fake_mpiexec"
    sh.write_text(textwrap.dedent("""\
        #!/bin/bash
        while [[ $# -gt 0 ]]; do
          case "$1" in
            -n|--ppn) shift 2 ;;
            --*) shift ;;
            *) break ;;
          esac
        done
        exec "$@"
    """))
    sh.chmod(0o755)
    return str(sh)


@pytest.fixture
def live_platform(fake_mpiexec):
    return PlatformSpec(
        name="testbox",
        mpi_runner="mpich",
        runner_name=fake_mpiexec,
        cores_per_node=4,
        gpu_setting_type="env",
        gpu_setting_name="CUDA_VISIBLE_DEVICES",
    )


def one_node_assignment(procs=1, gpu_ids=(), name="localhost"):
    return Assignment(
        rset_ids=(0,),
        nodes=[AssignedNode(node_index=0, name=name, procs=procs,
                            gpu_ids=tuple(gpu_ids))],
        total_procs=procs,
        total_gpus=len(gpu_ids),
    )


@pytest.fixture
def assignment():
    return one_node_assignment()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of a run."""
    rows = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, ()):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or "test_criterion_" not in nodeid:
                continue
            if outcome == "passed" and getattr(rep, "when", "call") != "call":
                continue
            rows[nodeid.split("::")[-1]] = outcome.upper()
    if rows:
        terminalreporter.section("acceptance criteria")
        for name in sorted(rows):
            terminalreporter.write_line(f"{rows[name]:7s} {name}")
