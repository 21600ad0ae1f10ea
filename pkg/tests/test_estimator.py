import numpy as np
import pytest
from sklearn.base import clone

from protomlc.datamodel import SynthConfig, synthesize
from protomlc.estimator import MultimodalPrototypeClassifier

SMALL_ENC = {"model_dim": 8, "num_heads": 2, "proj_dim": 4, "ffn_dim": 8}
FAST = {"prototype_refresh_interval": 3, "prototype_buffer_size": 16}


def _model(**kw):
    base = dict(fusion_layers=1, stage1_epochs=1, stage2_epochs=2, batch_size=8, lr=1e-2,
                encoder_options=SMALL_ENC, train_options=FAST)
    base.update(kw)
    return MultimodalPrototypeClassifier(**base)


def test_params_round_trip():
    m = _model(tau=0.2)
    assert m.get_params()["tau"] == 0.2
    c = clone(m).set_params(loss="bce")
    assert c.loss == "bce" and m.loss == "mlc"


def test_fit_predict_score(tiny_dataset):
    train, test = tiny_dataset.split("train"), tiny_dataset.split("test")
    m = _model().fit(train)
    proba = m.predict_proba(test)
    assert proba.shape == (len(test), 4) and np.all((proba >= 0) & (proba <= 1))
    pred = m.predict(test)
    assert set(np.unique(pred)) <= {0, 1}
    assert 0 <= m.score(test) <= 1
    assert m.transform(test).shape == (len(test), 4)
    assert m.report(test).n_samples == len(test)
    # explicit labels equal to the stored ones give the same model
    y = np.stack([s.labels for s in train])
    m2 = _model().fit(train, y)
    np.testing.assert_array_equal(m2.predict_proba(test), proba)


def test_single_label_mode():
    ds, _ = synthesize(SynthConfig(num_classes=3, d_v=4, d_t=4, tokens_v=3, tokens_t=3, n_train=24, n_val=0,
                                   n_test=9, task_mode="singlelabel", fine_grained_pairs=[[0, 1]]))
    train = ds.split("train")
    ids = np.array([int(np.argmax(s.labels)) for s in train])
    m = _model(task_mode="singlelabel", loss="bce").fit(train, ids)
    pred = m.predict(ds.split("test"))
    assert pred.shape == (9,) and pred.max() < 3
    assert 0 <= m.score(ds.split("test")) <= 1


def test_input_validation(tiny_dataset):
    m = _model()
    with pytest.raises(TypeError):
        m.fit(tiny_dataset)
    with pytest.raises(ValueError):
        m.fit([])
    with pytest.raises(ValueError):
        m.fit(tiny_dataset.split("train"), np.full((48, 4), 2))
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        m.predict(tiny_dataset.split("test"))
