import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from raincast import metrics as M

positive = arrays(float, st.integers(2, 30), elements=st.floats(0.1, 1e3))


def test_rmse_examples():
    assert M.rmse([0.0, 0.0], [3.0, 4.0]) == math.sqrt(12.5)
    assert M.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert M.rmse([1.0, 2.0, 3.0], [3.5, 4.5, 5.5]) == pytest.approx(2.5)


def test_accuracy_examples():
    assert M.accuracy([100.0], [90.0]) == pytest.approx(90.0)
    assert M.accuracy([5.0, 7.0], [5.0, 7.0]) == 100.0
    val, kind = M.accuracy([0.0, 10.0], [0.0, 10.0], return_kind=True)
    assert (val, kind) == (100.0, "smape")
    assert M.accuracy([100.0], [90.0], return_kind=True)[1] == "mape"


def test_smape_examples():
    assert M.smape([10.0], [30.0]) == 100.0
    assert M.smape([0.0], [5.0]) == 200.0
    assert M.smape([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert M.smape([0.0, 10.0], [0.0, 10.0]) == 0.0
    with pytest.raises(M.MetricError):
        M.smape([0.0], [0.0])


def test_nse_examples():
    obs = np.array([1.0, 2.0, 4.0, 9.0])
    assert M.nse(obs, obs) == 1.0
    assert M.nse(obs, np.full(4, obs.mean())) == pytest.approx(0.0, abs=1e-15)
    assert M.nse(obs, obs[::-1]) < 0
    with pytest.raises(M.MetricError):
        M.nse([2.0, 2.0], [1.0, 2.0])


def test_errors():
    with pytest.raises(M.MetricError):
        M.rmse([], [])
    with pytest.raises(M.MetricError):
        M.rmse([1.0], [1.0, 2.0])
    with pytest.raises(M.MetricError):
        M.mape([0.0, 1.0], [0.0, 1.0])


@given(positive)
def test_perfect_prediction_identities(obs):
    assert M.accuracy(obs, obs) == 100.0
    assert M.smape(obs, obs) == 0.0
    assert M.rmse(obs, obs) == 0.0
    if np.ptp(obs) > 0:
        assert M.nse(obs, obs) == 1.0


@given(positive, positive)
def test_smape_bounded(a, b):
    n = min(a.size, b.size)
    v = M.smape(a[:n], b[:n])
    assert 0.0 <= v <= 200.0


@given(positive, st.floats(-50, 50))
def test_rmse_constant_offset(obs, c):
    assert M.rmse(obs, obs + c) == pytest.approx(abs(c), rel=1e-9, abs=1e-9)


def test_eval_table_aggregation():
    rng = np.random.default_rng(0)
    obs = rng.uniform(10, 100, (5, 2, 3))
    pred = obs + rng.normal(0, 5, obs.shape)
    t = M.eval_table(obs, pred, ["a", "b"])
    assert len(t.cells) == 6 and t.cells[("b", 3)]["count"] == 5
    assert t.cells[("a", 1)]["rmse"] == pytest.approx(M.rmse(obs[:, 0, 0], pred[:, 0, 0]))
    assert t.station_nse["a"] == pytest.approx(M.nse(obs[:, 0], pred[:, 0]))
    agg = t.aggregate()
    assert agg["nse"] == pytest.approx(np.mean(list(t.station_nse.values())))
    assert agg["rmse"] == pytest.approx(np.mean([c["rmse"] for c in t.cells.values()]))
    assert M.summary(obs, obs)["accuracy"] == 100.0
    with pytest.raises(M.MetricError):
        M.eval_table(obs, pred[:, :1], ["a"])


def test_eval_rows_csv(tmp_path):
    p = tmp_path / "e.csv"
    M.write_eval_rows([{"cluster": 1, "metric": "nse", "raw": 0.5, "mapped": 0.25}], ["raw", "mapped"], p)
    assert p.read_text() == "cluster,metric,raw,mapped\n1,nse,0.5,0.25\n"
