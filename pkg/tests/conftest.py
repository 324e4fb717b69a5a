import pytest

from qsafenet.harness import NodeConfig, LinkConfig, TopologyConfig, load_topology


def line_config(n_qn, *, cn=0, prefill=64, key_bits=256, **defaults):
    """QN_0 - QN_1 - ... - QN_{n-1} plus ``cn`` classical nodes, one app each."""
    nodes = [NodeConfig(f"Q{i}", "QN", (f"APP_Q{i}",)) for i in range(n_qn)]
    nodes += [NodeConfig(f"C{i}", "CN", (f"APP_C{i}",)) for i in range(cn)]
    links = [LinkConfig(f"Q{i}-Q{i + 1}", f"Q{i}", f"Q{i + 1}", key_bits, 1000.0, 100 + i) for i in range(n_qn - 1)]
    return TopologyConfig(nodes, links, {"prefill": prefill, "kdf_out_bits": key_bits, **defaults})


@pytest.fixture
def fig2():
    with load_topology("fig2.json", seed=7) as tb:
        yield tb


@pytest.fixture
def fig2_dual():
    from qsafenet.harness import read_topology

    cfg = read_topology("fig2.json")
    cfg.defaults["dual_kem"] = True
    with load_topology(cfg, seed=8) as tb:
        yield tb


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
