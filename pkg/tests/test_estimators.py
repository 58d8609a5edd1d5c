import numpy as np
import pytest
from sklearn.base import clone

from ltu import synthenv as se
from ltu.estimators import (DecisionPretrainer, QuantileBinner, RewardClassifier, check_trajectories,
                            check_values)
from ltu.evaluate import ContaminationError

KW = dict(d_model=8, n_heads=2, n_layers=1, max_seq_len=64, steps=3, batch_size=4)


@pytest.fixture(scope="module")
def data():
    spec = se.make_domain("ppc", seed=0, lexicon_size=6, n_categories=5, n_calibration=4000)
    rng = np.random.default_rng(0)
    ct = se.sample_dataset(spec, spec.category_names, 40, rng)
    seen = {t.content_hash() for t in ct}
    tr = se.sample_dataset(spec, spec.category_names, 30, rng, tasks=["ctr"], exclude=seen)
    te = se.sample_dataset(spec, spec.category_names, 20, rng, tasks=["ctr"],
                           exclude=seen | {t.content_hash() for t in tr})
    return ct, tr, te


def test_binner(tmp_path):
    b = QuantileBinner(n_bins=3).fit(np.arange(1, 10))
    np.testing.assert_allclose(b.edges_, [11 / 3, 19 / 3])
    assert b.transform(np.arange(1, 10)).tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert b.transform([[4.0], [9.0]]).shape == (2, 1)
    assert b.fit_transform(np.arange(1, 10).reshape(-1, 1)).ravel().tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert clone(b).get_params() == {"n_bins": 3, "task": ""}


def test_value_validation():
    with pytest.raises(ValueError):
        check_values([[1, 2], [3, 4]])
    with pytest.raises(ValueError):
        check_values([1.0, np.nan])
    with pytest.raises(ValueError):
        check_values([])


def test_trajectory_validation(data):
    ct, _, _ = data
    assert check_trajectories([t.to_json() for t in ct[:3]]) == ct[:3]
    relabelled, y = check_trajectories(ct[:3], [0, 1, 2])
    assert [t.final_reward for t in relabelled] == [0, 1, 2]
    with pytest.raises(ValueError):
        check_trajectories(ct[:3], [0, 1])
    with pytest.raises(TypeError):
        check_trajectories([1, 2])
    with pytest.raises(ValueError):
        check_trajectories([])


def test_pretrain_then_classify(vocab, data):
    ct, tr, te = data
    pre = DecisionPretrainer(vocab=vocab, **KW).fit(ct + ["the old river opens a window"])
    assert len(pre.loss_curve_) == 3
    assert np.isfinite(pre.score(ct[:5]))
    clf = RewardClassifier(task="ppc_ctr", vocab=vocab, init=pre, **KW).fit(tr)
    assert clf.classes_.tolist() == [0, 1, 2]
    proba = clf.predict_proba(te)
    assert proba.shape == (20, 3)
    np.testing.assert_allclose(proba.sum(1), 1.0)
    np.testing.assert_array_equal(clf.predict(te), proba.argmax(1))
    assert 0.0 <= clf.score(te) <= 1.0
    with pytest.raises(ContaminationError):
        clf.score(tr)


def test_fresh_classifier_is_deterministic(vocab, data):
    _, tr, te = data
    a = RewardClassifier(task="ppc_ctr", vocab=vocab, **KW).fit(tr)
    b = clone(a).fit(tr)
    assert a.params_.flat().tobytes() == b.params_.flat().tobytes()
    assert a.get_params()["task"] == "ppc_ctr"
