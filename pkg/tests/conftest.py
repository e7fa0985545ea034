import pytest
import torch

from embdiff import DenoiserConfig, Vocabulary, build_model, make_linear_schedule

torch.set_num_threads(2)

_acceptance_reports = []


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained small model for contract/determinism tests."""
    vocab = Vocabulary.build(f"w{i}" for i in range(20))
    config = DenoiserConfig(
        layers=1, heads=2, model_dim=32, embed_dim=16, max_len=8, ffn_dim=64
    )
    model = build_model(config, vocab, make_linear_schedule(50), seed=0)
    model.eval()
    return model


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if "test_acceptance" in item.nodeid and rep.when in ("call", "setup"):
        if rep.when == "call" or rep.skipped:
            _acceptance_reports.append((item.name, rep.passed, rep.skipped))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_reports:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, skipped in _acceptance_reports:
        status = "SKIP" if skipped else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"{status:4s}  {name}")
