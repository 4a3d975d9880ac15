import numpy as np
import pytest

from helpers import check_gradient
from stephys import autograd as ag
from stephys.autograd import Tensor
from stephys.model import (
    ClassifierModel,
    LinearModel,
    TrainConfig,
    TrainingDiverged,
    WeightFileError,
    fnv1a_64,
    load_weights,
    read_weight_header,
    save_weights,
    train,
    weights_bytes,
)


def test_fnv1a_known_values():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_spec_string_and_parameter_budget():
    m = ClassifierModel()
    assert m.spec_string == "cnn;input=32x32x3;conv3x3:8,relu,pool2;conv3x3:16,relu,pool2;conv3x3:32,relu,pool2;linear:4"
    assert m.parameter_count() < 10**6
    assert ClassifierModel(input_shape=(64, 64, 3)).parameter_count() < 10**6


def test_oversized_model_rejected():
    with pytest.raises(ValueError):
        ClassifierModel(input_shape=(256, 256, 3), channels=(64, 128, 256))


def test_forward_shape_and_shape_error(untrained_model, rng):
    x = rng.uniform(size=(5, 32, 32, 3)).astype(np.float32)
    assert untrained_model.forward(x).shape == (5, 4)
    with pytest.raises(ag.ShapeError):
        untrained_model.forward(rng.uniform(size=(5, 28, 28, 3)))


def test_zero_head_gives_equal_logits():
    m = ClassifierModel(seed=1)
    m.head_w.data[...] = 0
    m.head_b.data[...] = 0
    logits = m.forward(np.zeros((1, 32, 32, 3), dtype=np.float32)).data
    assert np.all(logits == logits[0, 0])


def test_identical_images_identical_rows(untrained_model, rng):
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    logits = untrained_model.forward(np.stack([img, img])).data
    assert logits[0].tobytes() == logits[1].tobytes()


def test_forward_is_pure(untrained_model, rng):
    x = rng.uniform(size=(3, 32, 32, 3)).astype(np.float32)
    assert untrained_model.forward(x).data.tobytes() == untrained_model.forward(x).data.tobytes()


def test_input_gradient_matches_finite_differences():
    m = ClassifierModel(input_shape=(8, 8, 3), channels=(3, 4, 4), seed=5).astype(np.float64)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(2, 8, 8, 3))
    labels = np.array([1, 3])
    err = check_gradient(lambda t: ag.softmax_cross_entropy(m.forward(t), labels), x)
    assert err < 1e-3


def test_parameter_gradients_match_finite_differences():
    m = ClassifierModel(input_shape=(8, 8, 3), channels=(2, 3, 3), seed=6).astype(np.float64)
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(size=(2, 8, 8, 3)), dtype=np.float64)
    labels = np.array([0, 2])
    for p in m.parameters():
        original = p.data.copy()
        grad = _param_grad(m, p, x, labels)
        numeric = np.zeros_like(original)
        flat = numeric.reshape(-1)
        for i in range(original.size):
            for sgn in (1, -1):
                q = original.copy().reshape(-1)
                q[i] += sgn * 1e-5
                p.data = q.reshape(original.shape)
                with ag.no_grad():
                    flat[i] += sgn * float(ag.softmax_cross_entropy(m.forward(x), labels).data) / 2e-5
        p.data = original
        denom = np.abs(grad) + np.abs(numeric)
        keep = denom > 1e-8
        assert np.max(np.abs(grad - numeric)[keep] / denom[keep], initial=0.0) < 1e-3


def _param_grad(m, p, x, labels):
    for q in m.parameters():
        q.grad = None
    ag.backward(ag.softmax_cross_entropy(m.forward(x), labels))
    return p.grad.copy()


def test_zero_learning_rate_keeps_parameters(small_corpus):
    x, y = small_corpus
    m = ClassifierModel(seed=2)
    before = weights_bytes(m)
    train(m, x[:8], y[:8], TrainConfig(epochs=1, batch_size=4, learning_rate=0.0, val_fraction=0.0))
    assert weights_bytes(m) == before


def test_training_is_deterministic(small_corpus):
    x, y = small_corpus
    runs = []
    for _ in range(2):
        m = ClassifierModel(seed=4)
        r = train(m, x, y, TrainConfig(epochs=2, batch_size=16, seed=9))
        runs.append((weights_bytes(m), [e.val_accuracy for e in r.epochs]))
    assert runs[0] == runs[1]


def test_training_reports_epochs(small_corpus):
    x, y = small_corpus
    r = train(ClassifierModel(seed=4), x, y, TrainConfig(epochs=3, batch_size=16))
    assert [e.epoch for e in r.epochs] == [0, 1, 2]
    assert r.heldout_accuracy == r.epochs[-1].val_accuracy
    assert all(0.0 <= e.train_accuracy <= 1.0 for e in r.epochs)


def test_divergence_reports_epoch(small_corpus):
    x, y = small_corpus
    m = ClassifierModel(seed=4)
    m.head_w.data[...] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(m, x, y, TrainConfig(epochs=2))
    assert info.value.epoch == 0


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1.0}, {"optimizer": "rmsprop"}, {"val_fraction": 1.0}],
)
def test_bad_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_sgd_optimizer_reduces_loss(small_corpus):
    x, y = small_corpus
    m = ClassifierModel(seed=4)
    with ag.no_grad():
        before = float(ag.softmax_cross_entropy(m.forward(x), y).data)
    train(m, x, y, TrainConfig(epochs=3, batch_size=16, optimizer="sgd", learning_rate=0.01, val_fraction=0.0))
    with ag.no_grad():
        after = float(ag.softmax_cross_entropy(m.forward(x), y).data)
    assert after < before


def test_weight_roundtrip_is_bit_exact(tmp_path, rng):
    m = ClassifierModel(seed=11)
    save_weights(m, tmp_path / "m.stw")
    back = load_weights(tmp_path / "m.stw")
    x = rng.uniform(size=(10, 32, 32, 3)).astype(np.float32)
    assert back.forward(x).data.tobytes() == m.forward(x).data.tobytes()
    header = read_weight_header(tmp_path / "m.stw")
    assert header["spec"] == m.spec_string
    assert header["K"] == "4"
    assert int(header["fingerprint"], 16) == fnv1a_64(m.spec_string)


def test_weight_file_layout(tmp_path):
    m = ClassifierModel(seed=11)
    save_weights(m, tmp_path / "m.stw")
    raw = (tmp_path / "m.stw").read_bytes()
    assert raw[:4] == b"STW1"
    size = int.from_bytes(raw[4:8], "little")
    assert raw[8 : 8 + size].decode().startswith("spec=cnn;")
    assert int.from_bytes(raw[8 + size : 12 + size], "little") == len(m.parameters())
    assert raw[12 + size : 16 + size] == b"STT1"


def test_load_into_mismatched_model_fails(tmp_path):
    save_weights(ClassifierModel(seed=1), tmp_path / "m.stw")
    with pytest.raises(WeightFileError, match="mismatch"):
        load_weights(tmp_path / "m.stw", ClassifierModel(num_classes=5))


def test_load_into_matching_model(tmp_path):
    src = ClassifierModel(seed=1)
    save_weights(src, tmp_path / "m.stw")
    dst = load_weights(tmp_path / "m.stw", ClassifierModel(seed=2))
    assert weights_bytes(dst) == weights_bytes(src)


def test_corrupt_magic_fails(tmp_path):
    save_weights(ClassifierModel(seed=1), tmp_path / "m.stw")
    raw = bytearray((tmp_path / "m.stw").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "m.stw").write_bytes(bytes(raw))
    with pytest.raises(WeightFileError, match="magic"):
        load_weights(tmp_path / "m.stw")


@pytest.mark.parametrize("keep", [2, 6, 40, 200, -3])
def test_truncated_file_fails(tmp_path, keep):
    save_weights(ClassifierModel(seed=1), tmp_path / "m.stw")
    raw = (tmp_path / "m.stw").read_bytes()
    (tmp_path / "t.stw").write_bytes(raw[:keep])
    with pytest.raises(WeightFileError):
        load_weights(tmp_path / "t.stw")


def test_linear_model_logits(rng):
    w = rng.normal(size=(12, 3))
    b = rng.normal(size=3)
    m = LinearModel(w, b, input_shape=(2, 2, 3), dtype=np.float64)
    x = rng.uniform(size=(4, 2, 2, 3))
    np.testing.assert_allclose(m.forward(x).data, x.reshape(4, -1) @ w + b, atol=1e-5)
