import logging
import os
from unittest import mock

import pytest

from conic_claims import settings


@mock.patch.dict(os.environ, clear=True)
def test_defaults_without_environment():
    assert settings.dd_budget() == settings.DD_BUDGET
    assert settings.node_budget() == settings.NODE_BUDGET
    assert settings.emm_samples() == settings.EMM_SAMPLES
    assert settings.log_level() == logging.INFO
    assert not settings.repair_netting()
    assert not settings.lp_debug()


@mock.patch.dict(
    os.environ,
    {
        "CONIC_CLAIMS_DD_BUDGET": "40",
        "CONIC_CLAIMS_NODE_BUDGET": "100",
        "CONIC_CLAIMS_LOG_LEVEL": "debug",
        "CONIC_CLAIMS_REPAIR_NETTING": "Yes",
    },
    clear=True,
)
def test_values_from_environment():
    assert settings.dd_budget() == 40
    assert settings.node_budget() == 100
    assert settings.log_level() == logging.DEBUG
    assert settings.repair_netting()


@mock.patch.dict(os.environ, {"CONIC_CLAIMS_NODE_BUDGET": ""}, clear=True)
def test_empty_value_falls_back_to_default():
    assert settings.node_budget() == settings.NODE_BUDGET


@pytest.mark.parametrize("raw,message", [("many", "must be an integer"), ("0", "must be positive")])
def test_invalid_budget(raw, message):
    with mock.patch.dict(os.environ, {"CONIC_CLAIMS_DD_BUDGET": raw}, clear=True):
        with pytest.raises(ValueError, match=message):
            settings.dd_budget()


@mock.patch.dict(os.environ, {"CONIC_CLAIMS_LOG_LEVEL": "chatty"}, clear=True)
def test_unknown_log_level():
    with pytest.raises(ValueError, match="not a logging level"):
        settings.log_level()
