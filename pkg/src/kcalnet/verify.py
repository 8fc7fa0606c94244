"""Self-check suites behind the ``verify`` CLI command.

Three suites: ``gradcheck`` (finite-difference checks of every layer and
both end-to-end models), ``stats`` (frozen reference-oracle fixtures for
the t machinery), and ``pipeline`` (split/batching determinism and
augmentation range invariants).  Each check returns a (name, passed,
detail) row; the CLI exits nonzero if any row fails.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, gradcheck
from . import layers as L
from .models import build_multimodal, build_unimodal, nano_config
from .data import AugmentPolicy, augment, make_batches, split, synth_generate
from .stats import paired_t_test, student_t_upper_tail

# Student-t upper tails computed once with an independent reference
# statistics library and frozen here.
T_TAIL_FIXTURES = [
    (0.0, 1, 0.5),
    (1.0, 1, 0.24999999999999978),
    (0.6339, 652, 0.2631842017366464),
    (2.5, 10, 0.015723422118304388),
    (-1.25, 30, 0.8895184878934217),
    (5.0, 3, 0.007696219036651148),
    (0.5, 100000, 0.308538088827209),
]

# (seed, n, t, p) for paired one-tailed tests on |N(80,20)| vs shifted
# errors; same provenance as above.
PAIRED_T_FIXTURES = [
    (11, 25, -0.39290226437360615, 0.6510700751376968),
    (23, 21, 0.17137285964207974, 0.43282631370318475),
    (47, 23, -0.5420886425880952, 0.7033968376526003),
]

Check = tuple[str, bool, str]


def _check(name: str, value: float, bound: float) -> Check:
    return (name, value <= bound, f"{value:.3g} (bound {bound:g})")


def run_gradcheck_suite() -> list[Check]:
    rng = np.random.default_rng(7)
    checks: list[Check] = []

    def t64(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)

    x = t64(3, 5)
    w = t64(5, 4)
    checks.append(_check("matmul", gradcheck(
        lambda a, b: T.reduce_mean(T.matmul(a, b)), [x, w]), 1e-6))

    img = t64(2, 6, 6, 3)
    ker = t64(3, 3, 3, 4)
    checks.append(_check("conv2d", gradcheck(
        lambda a, k: T.reduce_mean(T.mul(T.conv2d(a, k, 2, "same"),
                                         T.conv2d(a, k, 2, "same"))), [img, ker]), 1e-6))

    dker = t64(3, 3, 3)
    checks.append(_check("depthwise_conv2d", gradcheck(
        lambda a, k: T.reduce_mean(T.mul(T.depthwise_conv2d(a, k, 1, "valid"),
                                         T.depthwise_conv2d(a, k, 1, "valid"))),
        [img, dker]), 1e-6))

    s = t64(4, 6)
    checks.append(_check("softmax", gradcheck(
        lambda a: T.reduce_mean(T.mul(T.softmax(a, -1), a)), [s]), 1e-6))

    # relu inputs bounded away from the kink
    r = Tensor(rng.uniform(0.2, 1.0, (4, 6)) * rng.choice([-1.0, 1.0], (4, 6)),
               requires_grad=True, dtype=np.float64)
    checks.append(_check("relu", gradcheck(
        lambda a: T.reduce_mean(T.mul(T.relu(a), a)), [r]), 1e-6))

    dense = L.Dense(5, 3, rng, np.float64)
    xd = t64(4, 5)
    checks.append(_check("dense", gradcheck(
        lambda a, wt, bias: T.reduce_mean(T.mul(dense.forward(a), dense.forward(a))),
        [xd, dense.weights, dense.bias]), 1e-6))

    bn = L.BatchNorm(3, dtype=np.float64)
    xb = t64(6, 3)
    checks.append(_check("batchnorm", gradcheck(
        lambda a, g, b: T.reduce_mean(T.mul(bn.forward(a, "train"), a)),
        [xb, bn.gamma, bn.beta]), 1e-6))

    mha = L.MultiHeadAttention(8, 2, 3, rng, np.float64)
    q = t64(1, 3, 8)
    kv = t64(1, 4, 8)
    checks.append(_check("attention", gradcheck(
        lambda qq, kk, *ws: T.reduce_mean(mha.forward(qq, kk)),
        [q, kv, mha.wq, mha.wk, mha.wv, mha.wo]), 1e-6))

    table = L.EmbeddingTable(6, 4, rng, np.float64)
    ids = np.array([[0, 2, 5], [1, 1, 3]])
    checks.append(_check("embedding", gradcheck(
        lambda tab: T.reduce_mean(T.mul(T.gather_rows(tab, ids),
                                        T.gather_rows(tab, ids))), [table.table]), 1e-6))

    tids = np.array([[2, 3, 0, 0], [4, 1, 5, 0]])
    for kind, build in (("unimodal", build_unimodal), ("multimodal", build_multimodal)):
        model, image, eps = pick_conditioned_model(build, nano_config(), tids)
        tensors = [p for _, p in sorted(model.params().items())]

        def fwd(*ps, _model=model, _image=image, _tids=tids):
            out = _model.forward(_image, _tids if _model.kind == "multimodal" else None,
                                 mode="eval")
            return T.reduce_mean(out)

        checks.append(_check(f"end_to_end_{kind}", gradcheck(fwd, tensors, eps=eps), 1e-5))
    return checks


def _jitter_normalization(model, rng: np.random.Generator) -> None:
    """Move batch-norm shifts and running stats off their fresh-build zeros.

    With beta = 0 and running_mean = 0, any fully clamped (all-zero) conv
    window lands the next pre-activation exactly on the relu kink, where
    central differences are invalid.  Jittering puts the check at a generic
    point in parameter space."""
    for key, p in model.params().items():
        if key.endswith(".beta"):
            p.data = p.data + rng.uniform(-0.2, 0.2, p.shape)
    for key, buf in model.buffers().items():
        if key.endswith("running_mean"):
            buf += rng.uniform(-0.1, 0.1, buf.shape)
        else:
            buf *= rng.uniform(0.8, 1.25, buf.shape)


def pick_conditioned_model(build, cfg, tids, seeds: int = 64):
    """Scan build seeds and keep the model whose eval-mode pre-activations
    sit farthest from the relu kinks, so central differences stay on one
    linear piece.  Returns (model, image, eps) with the finite-difference
    step sized to the found margin.  Deterministic given the arguments."""
    rng = np.random.default_rng(1234)
    image_shape = (2, cfg.image_size, cfg.image_size, 3)
    image = Tensor(rng.uniform(0.1, 0.9, image_shape), dtype=np.float64)

    def conditioned(seed: int):
        model = build(cfg, seed, np.float64)
        _jitter_normalization(model, np.random.default_rng(seed + 99))
        return model

    best_seed, best_margin = 0, -1.0
    for seed in range(seeds):
        model = conditioned(seed)
        with T.monitor_kink_distances() as dists:
            model.forward(image, tids if model.kind == "multimodal" else None,
                          mode="eval")
        margin = min(dists)
        if margin > best_margin:
            best_seed, best_margin = seed, margin
    eps = float(min(5e-5, best_margin / 5.0))
    return conditioned(best_seed), image, eps


def run_stats_suite() -> list[Check]:
    checks: list[Check] = []
    for t, df, expected in T_TAIL_FIXTURES:
        got = student_t_upper_tail(t, df)
        checks.append((f"t_tail(t={t}, df={df})", abs(got - expected) <= 1e-9,
                       f"got {got!r}, frozen {expected!r}"))
    for seed, n, t_exp, p_exp in PAIRED_T_FIXTURES:
        rng = np.random.default_rng(seed)
        drawn = int(rng.integers(20, 60))
        assert drawn == n, f"fixture drift: drew n={drawn}, frozen n={n}"
        a = rng.normal(80, 20, n)
        b = a - rng.normal(1.0, 15, n)
        res = paired_t_test(np.abs(a), np.abs(b), alpha=0.1)
        ok = abs(res.t_stat - t_exp) <= 1e-9 and abs(res.p_value - p_exp) <= 1e-9
        checks.append((f"paired_t(seed={seed})", ok,
                       f"t {res.t_stat!r} vs {t_exp!r}, p {res.p_value!r} vs {p_exp!r}"))
    return checks


def run_pipeline_suite() -> list[Check]:
    checks: list[Check] = []
    records, _ = synth_generate(40, seed=5, text_signal=0.5, image_size=16)

    ds1 = split(records, 0.8, seed=9)
    ds2 = split(records, 0.8, seed=9)
    ids1 = [r.dish_id for r in ds1.train]
    partition = (set(ids1).isdisjoint(r.dish_id for r in ds1.test)
                 and len(ds1.train) + len(ds1.test) == len(records)
                 and len(ds1.train) == 32)
    checks.append(("split_partition", partition,
                   f"{len(ds1.train)} train / {len(ds1.test)} test"))
    checks.append(("split_determinism", ids1 == [r.dish_id for r in ds2.train],
                   "same seed, same membership"))

    rng = np.random.default_rng(3)
    policy = AugmentPolicy(flip_prob=1.0)
    in_range = True
    for _ in range(50):
        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        out = augment(img, policy, rng)
        in_range &= bool((out >= 0).all() and (out <= 1).all())
    checks.append(("augment_range", in_range, "outputs within [0, 1]"))

    def batch_pass():
        return [(im.tobytes(), tg.tobytes())
                for im, _, tg in make_batches(records, 16, None, 16, shuffle_seed=21,
                                              augment_policy=AugmentPolicy())]

    checks.append(("batch_determinism", batch_pass() == batch_pass(),
                   "bitwise-identical batches"))
    return checks


SUITES = {
    "gradcheck": run_gradcheck_suite,
    "stats": run_stats_suite,
    "pipeline": run_pipeline_suite,
}


def run_suite(name: str) -> list[Check]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}, expected one of {sorted(SUITES)}")
    return SUITES[name]()
