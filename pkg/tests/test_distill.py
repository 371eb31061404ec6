import numpy as np
import pytest

from bkd import data, distill, experiments, nn
from bkd.data import Dataset
from bkd.losses import KdHyperParams


@pytest.fixture(scope="module")
def blobs():
    r = np.random.default_rng(0)
    centers = r.normal(size=(3, 6)) * 2
    y = r.integers(0, 3, size=90)
    x = centers[y] + r.normal(size=(90, 6))
    return Dataset(x, y, "classification", 3)


@pytest.fixture(scope="module")
def teacher(blobs):
    T = nn.init_mlp([6, 16, 3], 0)
    p = KdHyperParams(train_epochs=15, learning_rate=0.1, batch_size=16)
    T, _ = distill.train_scratch(T, blobs, p)
    return T


def _params(**kw):
    base = dict(train_epochs=2, hyper_epochs=2, perturb_steps=3, perturb_rate=0.1,
                learning_rate=0.05, batch_size=16, seed=3)
    base.update(kw)
    return KdHyperParams(**base)


def _same(a, b):
    for p, q in zip(a.params(), b.params()):
        if not np.array_equal(p.data, q.data):
            return False
    return True


def test_h0_is_bit_identical_to_vanilla(blobs, teacher):
    p = _params(hyper_epochs=0, momentum=0.5)
    S1, r1 = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, p, blobs)
    S2, r2 = distill.vanilla_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, p,
                                epochs=2 * p.train_epochs, eval_data=blobs)
    assert _same(S1, S2)
    assert r1.epoch_loss == r2.epoch_loss and r1.final == r2.final


def test_h0_embedding_is_bit_identical_to_vanilla():
    T = nn.init_embedding(6, 4, 2, [8], 2, 0)
    X = data.gen_token_task(6, 2, 40, 0)
    p = _params(hyper_epochs=0)
    S1, _ = distill.backward_kd_embedding(nn.init_embedding(6, 2, 2, [4], 2, 1), T, X, p)
    S2, _ = distill.vanilla_kd_embedding(nn.init_embedding(6, 2, 2, [4], 2, 1), T, X, p,
                                         epochs=2 * p.train_epochs)
    assert _same(S1, S2)


def test_same_seed_runs_are_identical(blobs, teacher, tmp_path):
    p = _params()
    runs = []
    for k in range(2):
        S, rep = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, p, blobs,
                                     checkpoint_dir=tmp_path / str(k))
        runs.append((nn.to_bytes(S), rep.fingerprint(), rep.to_csv()))
    assert runs[0] == runs[1]
    for name in ("pretrain", "minmax1", "minmax2", "finetune"):
        a = (tmp_path / "0" / f"student_{name}.bkd").read_bytes()
        assert a == (tmp_path / "1" / f"student_{name}.bkd").read_bytes()


def test_different_seed_changes_run(blobs, teacher):
    _, a = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, _params(seed=1))
    _, b = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, _params(seed=2))
    assert a.epoch_loss != b.epoch_loss


@pytest.mark.parametrize("k,eta", [(0, 0.1), (3, 0.0)])
def test_no_perturbation_duplicates_data(blobs, teacher, k, eta):
    seen = []
    _, rep = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs,
                                 _params(perturb_steps=k, perturb_rate=eta),
                                 on_aux=lambda j, aux: seen.append(aux))
    for aux in seen:
        assert np.array_equal(aux.inputs, blobs.inputs)
    assert all(a == b for a, b in rep.aux_divergence)
    assert rep.epoch_rows == [90, 90] + [180] * 4 + [90, 90]


@pytest.mark.parametrize("retention", ["reset_each_hyper_epoch", "accumulate"])
@pytest.mark.parametrize("batch", [7, 16, 90])
def test_step_accounting(blobs, teacher, retention, batch):
    p = _params(aux_retention=retention, batch_size=batch, hyper_epochs=3)
    _, rep = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, p)
    assert rep.optimizer_steps == distill.expected_steps(len(blobs), p)
    _, rep = distill.vanilla_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs, p)
    assert rep.optimizer_steps == distill.expected_steps(len(blobs), p, "vanilla")
    assert rep.epochs == p.train_epochs * (p.hyper_epochs + 2)


def test_accumulate_grows_training_set(blobs, teacher):
    _, rep = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs,
                                 _params(aux_retention="accumulate"))
    assert rep.epoch_rows == [90, 90, 180, 180, 270, 270, 90, 90]


def test_soft_only_labels_run(blobs, teacher):
    _, rep = distill.backward_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs,
                                 _params(aux_labels="soft_only", kd_form="alpha"), blobs)
    assert 0 <= rep.final["accuracy"] <= 1


def test_kd_improves_over_init(blobs, teacher):
    S0 = nn.init_mlp([6, 4, 3], 1)
    before = distill.evaluate(S0, blobs)["accuracy"]
    S, _ = distill.backward_kd(S0, teacher, blobs, _params(train_epochs=10))
    assert distill.evaluate(S, blobs)["accuracy"] > max(before, 0.8)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_raises(blobs, teacher):
    with pytest.raises(distill.TrainingDiverged):
        distill.vanilla_kd(nn.init_mlp([6, 4, 3], 1), teacher, blobs,
                           _params(learning_rate=1e200, lam=0.0))


def test_regression_pipeline_and_report():
    rec = experiments.SyntheticRecipe()
    rec.kd = rec.kd.replace(train_epochs=20, perturb_steps=5)
    T = experiments.synthetic_teacher(6, 0)
    X = data.gen_synthetic(T, 8, (-1, 1), 0)
    _, rep = distill.backward_kd(nn.init_polynomial(4, 0), T, X, rec.kd, X)
    assert rep.metric_name == "mse" and "mse" in rep.final
    lines = rep.to_csv().splitlines()
    assert lines[0] == "epoch,phase,rows,train_loss,mse" and len(lines) == 1 + 20 * 5
    assert rep.summary().startswith("epochs=100 ")


def test_embedding_pipeline_records_transform_residuals():
    T = nn.init_embedding(10, 6, 3, [8], 2, 0)
    X = data.gen_token_task(10, 3, 60, 1)
    S = experiments.token_student(0, experiments.TokenRecipe(vocab=10, seq_len=3,
                                                             student_dim=3), T)
    seen = []
    _, rep = distill.backward_kd_embedding(S, T, X, _params(hyper_epochs=3), X,
                                           on_aux=lambda j, aux: seen.append(aux))
    assert len(rep.transform_residual) == 3
    assert max(rep.transform_residual) < 1e-8
    for aux in seen:
        assert np.all(aux.divergence >= aux.origin_divergence)


def test_identity_transform_when_embeddings_match():
    T = nn.init_embedding(8, 8, 2, [8], 2, 0)
    S = nn.init_embedding(8, 8, 2, [4], 2, 1)
    S.W.data = T.W.data.copy()
    tr = distill.compute_transform(S.W.data, T.W.data)
    assert np.allclose(tr.Q, np.eye(8), atol=1e-10)


def test_empty_or_bad_inputs():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), "classification", 2)
    with pytest.raises(ValueError):
        distill.run_epochs(nn.init_mlp([2, 2], 0),
                           distill.TrainSet(np.zeros((0, 2)), None, np.zeros(0), np.zeros(0)),
                           _params(), 1, np.random.default_rng(0), distill.SGD([], 0.1),
                           distill.TrainReport({}), "x")
