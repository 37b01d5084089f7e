"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from civmed.data import Dataset, RoleMap
from civmed.simulation import (
    MEDIATION_ROLES,
    DgpSpec,
    OutcomeDgpSpec,
    generate_dataset,
    generate_outcome_dataset,
)

ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture(scope="session")
def outcome_data() -> Dataset:
    """Reliability 0.7, n = 2000 outcome-model sample."""
    return generate_outcome_dataset(OutcomeDgpSpec(seed=3)).dataset


@pytest.fixture(scope="session")
def mediation_data():
    return generate_dataset(DgpSpec(n=2000, seed=5))


@pytest.fixture
def outcome_roles() -> RoleMap:
    return RoleMap(outcome="Y", error_prone=("C1",), exposure_or_mediator="Z")


@pytest.fixture
def mediation_roles() -> RoleMap:
    return MEDIATION_ROLES


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240)
