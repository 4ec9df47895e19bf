import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctr import ctrlib  # noqa: E402
from ctr.agent import SimProcess  # noqa: E402
from ctr.bench.harness import LocalEscrow  # noqa: E402
from ctr.enclave import core  # noqa: E402
from ctr.enclave.memory import DATA_RESERVED, EnclaveConfig  # noqa: E402
from ctr.enclave.programs import counter_program  # noqa: E402
from ctr.mks import EscrowStore, MigrationKeyService, MksClient, MksServer, Platform  # noqa: E402

ACCEPTANCE: list[tuple[int, bool, str]] = []


def small_config(**kw) -> EnclaveConfig:
    base = dict(heap_size=1 << 14, stack_size=1 << 10, max_threads=2, debug=True)
    base.update(kw)
    return EnclaveConfig(**base)


def guest_state(e, tid: int) -> tuple:
    """Everything the guest can observe, excluding the library's reserved data area."""
    m = e.memory
    return (
        e.cpus[tid].snapshot(),
        bytes(m.heap.buf),
        bytes(m.stacks[tid].buf),
        bytes(m.data.buf[DATA_RESERVED:]),
    )


def counter_process(escrow, tmp_path: Path, *, steps: int = 1000, threads: int = 1, config=None, **kw):
    """A process with one counter enclave, prepared for migration and run for ``steps``."""
    proc = SimProcess(manifest_path=tmp_path / "manifest", escrow=escrow, **kw)
    idx = proc.create_enclave(counter_program(), config or small_config())
    ctrlib.prepare_migration(proc.enclave(idx))
    proc.host.host_prepare()
    for _ in range(threads):
        proc.start_thread(idx, 1)
    if steps:
        proc.run(steps)
    return proc


@pytest.fixture
def platform():
    return Platform()


@pytest.fixture
def escrow(tmp_path):
    esc = LocalEscrow(tmp_path / "mks")
    yield esc
    esc.close()


@pytest.fixture
def mks_server(tmp_path, platform):
    """A key service on a real TCP port; yields (server, service, platform)."""
    store = EscrowStore(tmp_path / "mks-tcp" / "log")
    service = MigrationKeyService(store, platform)
    server = MksServer(("127.0.0.1", 0), service)
    server.start()
    yield server, service, platform
    server.stop()
    store.close()


@pytest.fixture
def tcp_escrow(mks_server):
    server, _, platform = mks_server
    return MksClient(server.address, platform)


@pytest.fixture
def enclave():
    e = core.create_enclave(counter_program(), small_config())
    yield e
    if not e.destroyed:
        core.destroy_enclave(e)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, text in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {text}")
