import numpy as np
import pytest

from mbsma.dataset import Dataset, LongitudinalObservation, MarkerMeta, SurvivalRecord

# verdict lines appended by the acceptance tests, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def make_toy(n=40, families=("gaussian",), seed=0, horizon=4.0, step=0.5, rate=1 / 3,
             with_covariate=True):
    """Small longitudinal + survival dataset with loose links between markers and events."""
    rng = np.random.default_rng(seed)
    subs, obs = [], []
    for i in range(n):
        b = rng.normal(size=2 * len(families)) * np.tile([1.0, 0.5], len(families))
        T = rng.exponential(1 / rate)
        d = int(T < horizon)
        T = min(T, horizon)
        cov = (float(rng.normal()),) if with_covariate else ()
        sid = f"s{i + 1}"
        subs.append(SurvivalRecord(sid, T, d, cov))
        for t in np.arange(0.0, horizon + 1e-9, step):
            if t > T:
                break
            for k, fam in enumerate(families):
                m = b[2 * k] + (b[2 * k + 1] - 0.3) * t
                if fam == "gaussian":
                    y = m + 0.7 * rng.normal()
                else:
                    y = float(rng.random() < 1 / (1 + np.exp(-m)))
                obs.append(LongitudinalObservation(sid, k + 1, float(t), float(y)))
    meta = [MarkerMeta(f"m{k + 1}", fam) for k, fam in enumerate(families)]
    return Dataset.from_records(subs, obs, meta, ["x"] if with_covariate else [])


@pytest.fixture(scope="session")
def toy_gaussian():
    return make_toy(40, ("gaussian",), seed=3)


@pytest.fixture(scope="session")
def toy_mixed():
    return make_toy(40, ("gaussian", "binary"), seed=3)
