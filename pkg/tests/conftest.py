import pytest

from fedobp.data import dirichlet_partition, split_train_test, synth_dataset
from fedobp.federation import init_federation
from fedobp.nn import ModelSpec

TINY = ModelSpec(input_shape=(1, 8, 8), conv_channels=(2,), kernel_size=3, fc_widths=(6,), num_classes=4)


def tiny_federation(n_clients=5, seed=0, alpha=0.5, per_class=20):
    ds = synth_dataset(TINY.num_classes, per_class, TINY.input_shape, 0.3, seed)
    plan = dirichlet_partition(ds, n_clients, alpha, seed, min_per_client=4)
    plan = split_train_test(plan, 0.5, seed, ds.labels)
    server, clients = init_federation(TINY, ds, plan.assignments, seed)
    return ds, server, clients


@pytest.fixture
def tiny():
    return tiny_federation()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
