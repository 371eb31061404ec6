"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line with the measured
numbers before asserting. MNIST criteria read IDX files from
``$BKD_MNIST_DIR``; without it the files are prepared once from the small
MNIST copy bundled with mlxtend (skipped when mlxtend is missing). Teachers
are cached under ``$BKD_CACHE_DIR`` (default ``~/.cache/bkd``).
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bkd import auxgen, data, distill, experiments, losses, nn
from bkd import tensor as tn
from bkd.losses import KdHyperParams
from bkd.tensor import Tensor

from conftest import central_diff, rel_err

CACHE = Path(os.environ.get("BKD_CACHE_DIR", Path.home() / ".cache" / "bkd"))
SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        if not ok:
            pytest.fail(f"criterion {n}: {detail}", pytrace=False)
    return emit


@pytest.fixture(scope="module")
def mnist():
    env = os.environ.get("BKD_MNIST_DIR")
    if env:
        directory = Path(env)
    else:
        pytest.importorskip("mlxtend")
        sys.path.insert(0, str(SCRIPTS))
        from prepare_mnist import ensure_mnist
        directory = ensure_mnist(CACHE / "mnist")
    return experiments.load_mnist(directory)


@pytest.fixture(scope="module")
def mnist_teachers(mnist):
    train, test = mnist
    recipe = experiments.MnistRecipe()
    tag = f"{len(train)}-{len(test)}-{recipe.teacher_epochs}"
    out = {}
    for seed in range(3):
        path = CACHE / f"mnist_teacher_{tag}_seed{seed}.bkd"
        if path.exists():
            out[seed] = nn.load(path)
        else:
            out[seed], _ = experiments.train_mnist_teacher(train, test, seed, recipe)
            path.parent.mkdir(parents=True, exist_ok=True)
            nn.save(out[seed], path)
    return out


# ---------------------------------------------------------------------------


def test_criterion_1_mnist_table(mnist, mnist_teachers, verdict):
    train, test = mnist
    recipe = experiments.MnistRecipe()
    start = time.time()
    rows = [experiments.mnist_comparison(train, test, s, recipe, mnist_teachers[s])
            for s in range(3)]
    med = {k: float(np.median([r[k] for r in rows]))
           for k in ("teacher", "scratch", "vanilla_kd", "backward_kd")}
    checks = {
        "teacher>=0.974": med["teacher"] >= 0.974,
        "scratch 0.876+-0.015": abs(med["scratch"] - 0.876) <= 0.015,
        "vanilla 0.880+-0.015": abs(med["vanilla_kd"] - 0.880) <= 0.015,
        "gap>=0.015": med["backward_kd"] - med["vanilla_kd"] >= 0.015,
        "backward>=0.900": med["backward_kd"] >= 0.900,
    }
    detail = (f"n_train={len(train)} medians " +
              " ".join(f"{k}={v:.4f}" for k, v in med.items()) +
              f" gap={med['backward_kd'] - med['vanilla_kd']:+.4f}" +
              f" failed={[k for k, ok in checks.items() if not ok]}" +
              f" {time.time() - start:.0f}s")
    verdict(1, all(checks.values()), detail)


def test_criterion_2_parameter_counts(verdict):
    t = nn.param_count(nn.init_mlp(experiments.TEACHER_DIMS, 0))
    s = nn.param_count(experiments.mnist_student(0))
    ok = (t, s) == (636010, 3985)
    verdict(2, ok, f"teacher={t} student={s}")


def test_criterion_3_synthetic(verdict):
    recipe = experiments.SyntheticRecipe()
    start = time.time()
    ratios, aux_ok = [], True
    for seed in range(5):
        r = experiments.synthetic_run(seed, recipe)
        ratios.append(r["backward_grid"] / r["vanilla_grid"])
        for aux in r["aux"]:
            aux_ok &= bool(np.all(aux.divergence >= aux.origin_divergence))
    elapsed = time.time() - start
    ok = max(ratios) <= 0.9 and aux_ok and elapsed / 5 < 60
    detail = (f"backward/vanilla grid ratio per seed={[round(x, 4) for x in ratios]} "
              f"aux_monotone={aux_ok} {elapsed / 5:.1f}s/run")
    verdict(3, ok, detail)


def _fd_cases():
    def mat(r, *shape):
        return r.normal(size=shape)

    def kd_lambda(r):
        s, t = mat(r, 3, 4) * 2, mat(r, 3, 4) * 2
        y = r.integers(0, 4, size=3)
        return lambda a: losses.kd_loss_lambda(a, Tensor(t), y, 0.3, 2.5), [s]

    def bkd(r):
        return losses.bkd_loss, [mat(r, 3, 4), mat(r, 3, 4)]

    def kd_alpha(r):
        s, t = mat(r, 3, 4) * 2, mat(r, 3, 4) * 2
        y = r.integers(0, 4, size=3)
        return lambda a: losses.kd_loss_alpha(a, Tensor(t), y, 0.6, 1.5), [s]

    def relu(r):
        x = mat(r, 3, 4)
        return tn.relu, [np.where(np.abs(x) < 0.05, 0.5, x)]

    def gather(r):
        idx = r.integers(0, 5, size=7)
        return lambda w: tn.gather_rows(w, idx), [mat(r, 5, 3)]

    def mono(r):
        deg = int(r.integers(1, 8))
        return lambda x: tn.monomials(x, deg), [r.uniform(-1, 1, size=(4, 1))]

    return {
        "matmul": lambda r: (tn.matmul, [mat(r, 3, 4), mat(r, 4, 2)]),
        "linear": lambda r: (tn.linear, [mat(r, 3, 4), mat(r, 2, 4), mat(r, 2)]),
        "add": lambda r: (tn.add, [mat(r, 3, 4), mat(r, 3, 4)]),
        "sub": lambda r: (tn.sub, [mat(r, 3, 4), mat(r, 3, 4)]),
        "mul": lambda r: (tn.mul, [mat(r, 3, 4), mat(r, 3, 4)]),
        "scale": lambda r: (lambda a: tn.scale(a, 1.7), [mat(r, 3, 4)]),
        "tanh": lambda r: (tn.tanh, [mat(r, 3, 4)]),
        "relu": relu,
        "exp": lambda r: (tn.exp, [mat(r, 3, 4)]),
        "log": lambda r: (tn.log, [r.uniform(0.2, 3.0, size=(3, 4))]),
        "sum": lambda r: (tn.sum, [mat(r, 3, 4)]),
        "mean": lambda r: (tn.mean, [mat(r, 3, 4)]),
        "transpose": lambda r: (tn.transpose, [mat(r, 3, 4)]),
        "reshape": lambda r: (lambda a: tn.reshape(a, (2, 6)), [mat(r, 3, 4)]),
        "gather_rows": gather,
        "softmax": lambda r: (tn.softmax, [mat(r, 3, 4) * 3]),
        "monomials": mono,
        "affine_smooth": lambda r: (lambda p: tn.affine_smooth(p, 1e-3),
                                    [r.uniform(0, 1, size=(3, 4))]),
        "kd_loss_lambda": kd_lambda,
        "kd_loss_alpha": kd_alpha,
        "bkd_loss": bkd,
    }


def _fd_error(build, arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    w = np.random.default_rng(out.data.size).normal(size=out.shape)
    loss = tn.sum(tn.mul(out, Tensor(w))) if out.data.ndim else out
    analytic = tn.grad(loss, leaves)

    def f(*xs):
        o = build(*[Tensor(x) for x in xs]).data
        return float(np.sum(o * w)) if o.ndim else float(o)

    numeric = central_diff(f, [a.copy() for a in arrays])
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def test_criterion_4_gradient_suite(verdict):
    start = time.time()
    worst = {}
    for i, (name, case) in enumerate(_fd_cases().items()):
        r = np.random.default_rng(100 + i)
        worst[name] = max(_fd_error(*case(r)) for _ in range(50))
    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 60
    detail = (f"{len(worst)} ops x 50 instances, worst rel err={max(worst.values()):.2e} "
              f"failing={sorted(bad)} {elapsed:.1f}s")
    verdict(4, ok, detail)


def test_criterion_5_transform_oracle(verdict):
    r = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        V = int(r.integers(4, 40))
        d1, d2 = int(r.integers(1, min(V, 10) + 1)), int(r.integers(1, 12))
        W_S, W_T = r.normal(size=(d1, V)), r.normal(size=(d2, V))
        Q = auxgen.compute_transform(W_S, W_T).Q
        ref = np.linalg.lstsq(W_S.T, W_T.T, rcond=None)[0].T
        worst = max(worst, abs(np.linalg.norm(W_T - Q @ W_S) - np.linalg.norm(W_T - ref @ W_S)))
    exact = True
    for _ in range(20):
        d = int(r.integers(1, 9))
        W_S, W_T = r.normal(size=(d, d)), r.normal(size=(int(r.integers(1, 9)), d))
        Q = auxgen.compute_transform(W_S, W_T).Q
        exact &= bool(np.array_equal(Q, W_T @ np.linalg.inv(W_S)))
    ok = worst < 1e-9 and exact
    verdict(5, ok, f"max residual diff={worst:.2e} square case exact={exact}")


def test_criterion_6_token_pipeline(verdict):
    recipe = experiments.TokenRecipe()
    start = time.time()
    van, bwd, monotone, residual = [], [], True, 0.0
    for seed in range(5):
        r = experiments.token_run(seed, recipe)
        van.append(r["vanilla"])
        bwd.append(r["backward"])
        for aux in r["aux"]:
            monotone &= bool(np.all(aux.divergence >= aux.origin_divergence))
        rep = r["reports"][1]
        assert len(rep.transform_residual) == recipe.kd.hyper_epochs
        residual = max(residual, max(rep.transform_residual))
    mv, mb = float(np.median(van)), float(np.median(bwd))
    ok = mb >= mv and monotone and residual <= 1e-8
    detail = (f"median vanilla={mv:.4f} backward={mb:.4f} per-seed={list(zip(van, bwd))} "
              f"monotone={monotone} max Q residual={residual:.1e} {time.time() - start:.0f}s")
    verdict(6, ok, detail)


def _blobs():
    r = np.random.default_rng(0)
    centers = r.normal(size=(4, 8)) * 2
    y = r.integers(0, 4, size=120)
    return data.Dataset(centers[y] + r.normal(size=(120, 8)), y, "classification", 4)


def test_criterion_7_determinism(verdict):
    X = _blobs()
    T, _ = distill.train_scratch(nn.init_mlp([8, 32, 4], 0), X,
                                 KdHyperParams(train_epochs=10, learning_rate=0.1))
    p = KdHyperParams(train_epochs=3, hyper_epochs=2, perturb_steps=5, perturb_rate=0.2,
                      learning_rate=0.05, momentum=0.9, batch_size=16, seed=11)

    def same(a, b):
        return nn.to_bytes(a) == nn.to_bytes(b)

    S1, r1 = distill.backward_kd(nn.init_mlp([8, 3, 4], 1), T, X, p.replace(hyper_epochs=0))
    S2, r2 = distill.vanilla_kd(nn.init_mlp([8, 3, 4], 1), T, X, p, epochs=2 * p.train_epochs)
    h0 = same(S1, S2) and r1.epoch_loss == r2.epoch_loss

    tok_T = nn.init_embedding(8, 4, 3, [8], 2, 0)
    tok = data.gen_token_task(8, 3, 50, 0)
    E1, _ = distill.backward_kd_embedding(nn.init_embedding(8, 2, 3, [4], 2, 1), tok_T, tok,
                                          p.replace(hyper_epochs=0))
    E2, _ = distill.vanilla_kd_embedding(nn.init_embedding(8, 2, 3, [4], 2, 1), tok_T, tok, p,
                                         epochs=2 * p.train_epochs)
    h0 &= same(E1, E2)

    A, ra = distill.backward_kd(nn.init_mlp([8, 3, 4], 1), T, X, p)
    B, rb = distill.backward_kd(nn.init_mlp([8, 3, 4], 1), T, X, p)
    repeat = same(A, B) and ra.fingerprint() == rb.fingerprint()

    fixed = True
    for q in (p.replace(perturb_steps=0), p.replace(perturb_rate=0.0)):
        seen = []
        distill.backward_kd(nn.init_mlp([8, 3, 4], 1), T, X, q,
                            on_aux=lambda j, aux: seen.append(aux.inputs))
        fixed &= len(seen) == 2 and all(np.array_equal(x, X.inputs) for x in seen)
    ok = h0 and repeat and fixed
    verdict(7, ok, f"h0_equals_vanilla_2e={h0} same_seed_identical={repeat} "
                          f"k0_eta0_fixed={fixed}")


def test_criterion_8_few_sample(mnist, mnist_teachers, verdict):
    train, test = mnist
    recipe = experiments.MnistRecipe()
    van, bwd = [], []
    for seed in range(3):
        X = data.subsample(train, 0.1, seed, stratified=True)
        p = recipe.kd.replace(seed=seed, aux_retention="accumulate")
        T = mnist_teachers[seed]
        _, rv = distill.vanilla_kd(experiments.mnist_student(seed), T, X, p, eval_data=test)
        _, rb = distill.backward_kd(experiments.mnist_student(seed), T, X, p, eval_data=test)
        van.append(rv.final["accuracy"])
        bwd.append(rb.final["accuracy"])
    mv, mb = float(np.median(van)), float(np.median(bwd))
    detail = (f"n_subset={len(X)} median vanilla={mv:.4f} backward={mb:.4f} "
              f"per-seed={list(zip(van, bwd))}")
    verdict(8, mb >= mv, detail)
