import numpy as np
import pytest

from dcdml import dml, protocol
from dcdml.data import gen_sim1

# Every DML solve in the session is recorded so the moment-exactness
# criterion can be checked on all of them.
FIT_LOG: list[tuple[str, float, float]] = []
CRITERIA: dict[int, str] = {}

_original_fit_linear_cate = dml.fit_linear_cate


def _recording_fit_linear_cate(W, dataset, q_spec, h_spec, seed, n_folds=2, fold_of=None):
    beta, cov, cf, rank = _original_fit_linear_cate(W, dataset, q_spec, h_spec, seed, n_folds, fold_of)
    psi = dml.score_matrix(W, cf, beta)
    FIT_LOG.append((f"n={W.shape[0]} p={W.shape[1]} q={q_spec.label()} h={h_spec.label()}",
                    float(np.abs(psi.sum(axis=0)).max()), float(np.abs(psi).sum())))
    return beta, cov, cf, rank


dml.fit_linear_cate = _recording_fit_linear_cate
protocol.fit_linear_cate = _recording_fit_linear_cate


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_collection_modifyitems(items):
    # the moment-exactness criterion inspects every fit, so it runs last
    last = [it for it in items if "moment_exactness" in it.name]
    items[:] = [it for it in items if it not in last] + last


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture(scope="session")
def sim1_parties():
    parties, truth = gen_sim1(11)
    return parties, truth
