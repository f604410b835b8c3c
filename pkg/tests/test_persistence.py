import json
import struct

import numpy as np
import pytest

from conftest import toy_classification
from uqtab.data import fit_scaler
from uqtab.density import fit_ppca, train_autoencoder
from uqtab.discriminators import (
    MixturePrior,
    fit_temperature,
    sample_predictions,
    train_bbb,
    train_ensemble,
    train_logreg,
    train_mlp,
)
from uqtab.nets import TrainConfig
from uqtab.numerics import RngStream
from uqtab.persistence import MAGIC, ContainerError, dumps_model, load_model, loads_model, save_model

CFG = TrainConfig(learning_rate=0.01, max_epochs=2, patience=2, batch_size=32)


def _models():
    x, y = toy_classification(80, 4)
    rng = RngStream(0)
    mlp, _ = train_mlp(CFG, [5], x, y, x, y, rng, dropout_rate=0.2)
    bbb, _ = train_bbb(CFG, [5], x, y, x, y, rng, MixturePrior(0.3, 1.0, 0.2), mu_init=0.0, rho_init=-3.0)
    anchored, _ = train_ensemble("anchored", 2, CFG, [5], x, y, x, y, rng)
    boot, _ = train_ensemble("bootstrapped", 2, CFG, [5], x, y, x, y, rng)
    ae, _ = train_autoencoder(CFG, [3], 2, x, x, rng)
    return x, {
        "mlp": mlp,
        "temperature": fit_temperature(mlp, x, y),
        "logreg": train_logreg(x, y, C=10.0),
        "bbb": bbb,
        "anchored": anchored,
        "bootstrapped": boot,
        "ppca": fit_ppca(x, 2),
        "ae": ae,
    }


def _outputs(model, x):
    if hasattr(model, "novelty"):
        return model.novelty(x)
    if hasattr(model, "sample") and not hasattr(model, "members"):
        return sample_predictions(model, x, 3, RngStream(5)).probs
    return model.predict_proba(x)


@pytest.mark.parametrize("name", ["mlp", "temperature", "logreg", "bbb", "anchored", "bootstrapped", "ppca", "ae"])
def test_round_trip_bit_exact(name, tmp_path):
    x, models = _models()
    model = models[name]
    scaler = fit_scaler(x)
    path = save_model(tmp_path / f"{name}.uqm", model, scaler, {"lr": 0.01}, {"master_seed": 0})
    back, back_scaler, header = load_model(path)
    assert type(back) is type(model)
    np.testing.assert_array_equal(_outputs(back, x), _outputs(model, x))
    np.testing.assert_array_equal(back_scaler.mean, scaler.mean)
    assert header["hyperparameters"] == {"lr": 0.01}
    assert header["provenance"] == {"master_seed": 0}
    # re-serialising the loaded model reproduces the same bytes
    assert dumps_model(back, back_scaler, {"lr": 0.01}, {"master_seed": 0}) == path.read_bytes()


def test_container_layout():
    _, models = _models()
    buf = dumps_model(models["logreg"])
    assert buf[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen])
    assert header["variant"] == "logreg" and not header["has_scaler"]
    n_values = sum(int(np.prod(s)) for _, s in header["blocks"])
    assert len(buf) == 16 + hlen + 8 * n_values
    w = np.frombuffer(buf, dtype="<f8", count=4, offset=16 + hlen)
    np.testing.assert_array_equal(w, models["logreg"].weights)


def test_corrupt_containers_rejected():
    _, models = _models()
    buf = dumps_model(models["ppca"])
    with pytest.raises(ContainerError):
        loads_model(b"NOTAMODEL" + buf[9:])
    with pytest.raises(ContainerError):
        loads_model(buf[:-8])
    with pytest.raises(ContainerError):
        loads_model(buf + b"\0" * 8)
    with pytest.raises(ContainerError):
        dumps_model(object())
