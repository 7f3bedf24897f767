"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and budgets are pinned as module constants. Run with
``pytest tests/test_acceptance.py -v -s`` to see the lines as they happen; they
are repeated in the terminal summary either way.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from voxalign.autodiff import Tensor, concat, conv3d, grad_check, leaky_relu, linear, matmul, relu, softmax, upsample2
from voxalign.autodiff import global_avg_pool, mean, reshape, transpose
from voxalign.cli import main as cli_main
from voxalign.evaluation import OracleModel, evaluate_pair, rotation_sweep, translation_sweep
from voxalign.geom import (
    RigidTransform,
    orthogonalize6d,
    params_from_transform,
    rotation_error,
    transform_from_params,
)
from voxalign.nets import build, full_config, mnl_link, mnl_scores, param_count, res_down, res_up, snl_link, toy_config
from voxalign.synthgen import SynthConfig, gen_phantom, sample_rng
from voxalign.train import (
    LossConfig,
    PairStream,
    TrainConfig,
    evaluate_batches,
    loss,
    loss_tensor,
    stack_pairs,
    train,
)
from voxalign.volume import binarize, dice

GEOM_TOL = 1e-6
GEOM_BUDGET_S = 5.0
ATTN_TOL = 1e-5
ATTN_BUDGET_S = 10.0
GRAD_TOL = 1e-4
GRAD_NET_TOL = 1e-3
GRAD_BUDGET_S = 120.0
LOSS_TOL = 1e-10
ORACLE_DSC_MIN = 0.95
ORACLE_BUDGET_S = 300.0
ORACLE_SHAPE = (32, 32, 32)
LEARN_ITERS = 5000
LEARN_BATCH = 4
LEARN_LR = 1e-3
LEARN_HELDOUT = 100
LEARN_RE_MAX = 0.5
VOXEL_MM = 5.12 / 16
LEARN_TE_MAX = 2 * VOXEL_MM
OVERFIT_ITERS = 500
OVERFIT_FACTOR = 20.0
REPORTED_DNET_PARAMS = 4.9e6


def brute_attention(q, kv):
    out = np.zeros_like(kv)
    for k in range(q.shape[0]):
        s = [float(q[k] @ kv[j]) for j in range(kv.shape[0])]
        m = max(s)
        w = [math.exp(x - m) for x in s]
        z = math.fsum(w)
        for j in range(kv.shape[0]):
            out[k] += w[j] / z * kv[j]
    return out


def oracle_rotation_angle(R, R_hat):
    return float(Rotation.from_matrix(R.T @ R_hat).magnitude())


def test_criterion_1_geometry(criterion_log):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_orth = worst_det = worst_rt = worst_re = 0.0
    for _ in range(1000):
        R = orthogonalize6d(rng.standard_normal(6))
        worst_orth = max(worst_orth, np.max(np.abs(R.T @ R - np.eye(3))))
        worst_det = max(worst_det, abs(np.linalg.det(R) - 1))
        T = RigidTransform(R, rng.uniform(-1, 1, 3))
        back = transform_from_params(params_from_transform(T))
        worst_rt = max(worst_rt, np.max(np.abs(back.R - T.R)), np.max(np.abs(back.t - T.t)))
        v_hat = rng.standard_normal(6)
        worst_re = max(worst_re, abs(rotation_error(R, v_hat) - oracle_rotation_angle(R, orthogonalize6d(v_hat))))
    elapsed = time.perf_counter() - t0
    ok = max(worst_orth, worst_det, worst_rt, worst_re) <= GEOM_TOL and elapsed < GEOM_BUDGET_S
    criterion_log(1, ok, f"orth {worst_orth:.1e} det {worst_det:.1e} roundtrip {worst_rt:.1e} "
                         f"RE-vs-oracle {worst_re:.1e} (tol {GEOM_TOL:g}); {elapsed:.2f}s < {GEOM_BUDGET_S:g}s")
    assert ok


def test_criterion_2_attention(criterion_log):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    dual_exact = True
    for side in (1, 2, 3, 4):
        for c in (1, 4, 8):
            W = (rng.standard_normal((c, c)) / np.sqrt(c)).astype(np.float32)
            Xf = rng.standard_normal((1, c, side, side, side)).astype(np.float32)
            Xm = rng.standard_normal((1, c, side, side, side)).astype(np.float32)
            a, b = mnl_link(Tensor(Xf), Tensor(Xm), Tensor(W))
            s = snl_link(Tensor(Xf), Tensor(W))
            tf = (W.astype(np.float64) @ Xf[0].reshape(c, -1).astype(np.float64)).T
            tm = (W.astype(np.float64) @ Xm[0].reshape(c, -1).astype(np.float64)).T
            worst = max(worst, np.max(np.abs(a.data[0].reshape(c, -1).T - brute_attention(tf, tm))),
                        np.max(np.abs(b.data[0].reshape(c, -1).T - brute_attention(tm, tf))),
                        np.max(np.abs(s.data[0].reshape(c, -1).T - brute_attention(tf, tf))))
            _, _, E, Et = mnl_scores(Tensor(Xf), Tensor(Xm), Tensor(W))
            dual_exact &= bool(np.array_equal(Et.data, np.swapaxes(E.data, 1, 2)))
    elapsed = time.perf_counter() - t0
    ok = worst < ATTN_TOL and dual_exact and elapsed < ATTN_BUDGET_S
    criterion_log(2, ok, f"max abs err {worst:.1e} (tol {ATTN_TOL:g}, float32), duality exact {dual_exact}; "
                         f"{elapsed:.2f}s < {ATTN_BUDGET_S:g}s")
    assert ok


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _block(rng, names, shapes):
    p = {}
    for n, s in zip(names, shapes):
        p[n + "_w"] = _t(rng, *s, scale=0.3)
        p[n + "_b"] = _t(rng, s[0], scale=0.1)
    return p


def test_criterion_3_differentiation(criterion_log):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    errs = {}

    def probe(shape):
        return Tensor(rng.standard_normal(shape))

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    pa = probe((3, 4))
    errs["add/sub/mul"] = grad_check(lambda a, b: ((a + b) * (a - b) * pa).sum(), [a, b])
    m1, m2 = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    pm = probe((2, 3, 5))
    errs["matmul"] = grad_check(lambda x, y: (matmul(x, y) * pm).sum(), [m1, m2])
    x = _t(rng, 2, 3, 4)
    p = probe((2, 4, 3))
    errs["reshape/transpose"] = grad_check(lambda x: (transpose(reshape(x, (2, 3, 4)), (0, 2, 1)) * p).sum(), [x])
    errs["mean"] = grad_check(lambda x: mean(x * x, axis=1).sum(), [x])
    errs["getitem"] = grad_check(lambda x: (x[:, 1:, ::2] * x[:, 1:, ::2]).sum(), [x])
    y = _t(rng, 2, 2, 4)
    pc = probe((2, 5, 4))
    errs["concat"] = grad_check(lambda x, y: (concat([x, y], axis=1) * pc).sum(), [x, y])
    errs["relu"] = grad_check(lambda x: (relu(x) * p.reshape((2, 3, 4))).sum(), [x])
    errs["leaky_relu"] = grad_check(lambda x: (leaky_relu(x) * p.reshape((2, 3, 4))).sum(), [x])
    errs["softmax"] = grad_check(lambda x: (softmax(x, axis=-1) * p.reshape((2, 3, 4))).sum(), [x])
    lx, lw, lb = _t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)
    pl = probe((3, 4))
    errs["linear"] = grad_check(lambda x, w, b: (linear(x, w, b) * pl).sum(), [lx, lw, lb])
    for stride in (1, 2):
        cx, cw, cb = _t(rng, 1, 2, 4, 4, 4), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)
        pv = probe(conv3d(cx, cw, cb, stride=stride).shape)
        errs[f"conv3d s{stride}"] = grad_check(lambda x, w, b: (conv3d(x, w, b, stride=stride) * pv).sum(),
                                               [cx, cw, cb])
    ux = _t(rng, 1, 2, 2, 2, 2)
    pu = probe((1, 2, 4, 4, 4))
    errs["upsample2"] = grad_check(lambda x: (upsample2(x) * pu).sum(), [ux])
    pg = probe((1, 2))
    errs["global_avg_pool"] = grad_check(lambda x: (global_avg_pool(x) * pg).sum(), [ux])

    # composite blocks
    pdn = _block(rng, ["proj", "res1", "res2"], [(2, 2, 3, 3, 3)] * 3)
    names = sorted(pdn)
    xd = _t(rng, 1, 2, 4, 4, 4)
    pr = probe((1, 2, 2, 2, 2))
    errs["res_down"] = grad_check(lambda x, *ps: (res_down(x, dict(zip(names, ps))) * pr).sum(),
                                  [xd] + [pdn[k] for k in names])
    pup = _block(rng, ["up", "fuse", "res1", "res2"],
                 [(2, 2, 3, 3, 3), (2, 4, 3, 3, 3), (2, 2, 3, 3, 3), (2, 2, 3, 3, 3)])
    names_u = sorted(pup)
    xu, sk = _t(rng, 1, 2, 2, 2, 2), _t(rng, 1, 2, 4, 4, 4)
    pru = probe((1, 2, 4, 4, 4))
    errs["res_up"] = grad_check(lambda x, s, *ps: (res_up(x, s, dict(zip(names_u, ps))) * pru).sum(),
                                [xu, sk] + [pup[k] for k in names_u])
    fx, mx, W = _t(rng, 1, 3, 2, 2, 2), _t(rng, 1, 3, 2, 2, 2), _t(rng, 3, 3, scale=0.5)
    q1, q2 = probe((1, 3, 2, 2, 2)), probe((1, 3, 2, 2, 2))

    def mnl_fn(f, m, W):
        y1, y2 = mnl_link(f, m, W)
        return (y1 * q1).sum() + (y2 * q2).sum()

    errs["mnl_link"] = grad_check(mnl_fn, [fx, mx, W])
    errs["snl_link"] = grad_check(lambda f, W: (snl_link(f, W) * q1).sum(), [fx, W])
    theta = rng.standard_normal((3, 12))
    th = _t(rng, 3, 12)
    errs["loss"] = grad_check(lambda h: loss_tensor(theta, h), [th])

    net = build(toy_config("dnet", 8), seed=0, dtype=np.float64)
    f_in, m_in = rng.random((1, 1, 8, 8, 8)), rng.random((1, 1, 8, 8, 8))
    pn = probe((1, 12))
    keys = list(net.params)

    def net_fn(*ps):
        for k, v in zip(keys, ps):
            net.params[k] = v
        return (net(Tensor(f_in), Tensor(m_in)) * pn).sum()

    net_err = grad_check(net_fn, [net.params[k] for k in keys], n_samples=5)
    elapsed = time.perf_counter() - t0
    worst_name = max(errs, key=errs.get)
    ok = all(e < GRAD_TOL for e in errs.values()) and net_err < GRAD_NET_TOL and elapsed < GRAD_BUDGET_S
    criterion_log(3, ok, f"{len(errs)} primitive/block checks, worst {worst_name} {errs[worst_name]:.1e} "
                         f"(tol {GRAD_TOL:g}); toy D-net {net_err:.1e} (tol {GRAD_NET_TOL:g}); "
                         f"{elapsed:.1f}s < {GRAD_BUDGET_S:g}s")
    assert ok


def test_criterion_4_loss(criterion_log):
    rng = np.random.default_rng(4)

    def independent(th, hat, a=0.5, b=0.5, e=0.01):
        t, that = th[9:], hat[9:]
        return a * float(np.sum((t - that) ** 2)) / (float(np.sum(t**2)) + e) + b * float(np.sum((th[:9] - hat[:9]) ** 2))

    worst = max(abs(loss(th, hat) - independent(th, hat))
                for th, hat in (rng.standard_normal((2, 12)) for _ in range(100)))
    ident = np.eye(3).T.reshape(9)
    example = loss(np.r_[ident, 1, 0, 0], np.r_[ident, 0, 0, 0], LossConfig())
    ok = worst <= LOSS_TOL and round(example, 6) == 0.495050
    criterion_log(4, ok, f"100 pairs max diff {worst:.1e} (tol {LOSS_TOL:g}); worked example {example:.6f}")
    assert ok


def test_criterion_5_oracle_harness(criterion_log):
    t0 = time.perf_counter()
    vols = [gen_phantom(sample_rng(55, i), ORACLE_SHAPE) for i in range(3)]
    recs = rotation_sweep(OracleModel(), vols) + translation_sweep(OracleModel(), vols)
    elapsed = time.perf_counter() - t0
    te = max(r.te_mm for r in recs)
    re = max(r.re_rad for r in recs)
    dsc = min(r.dsc for r in recs)
    ok = te == 0.0 and re == 0.0 and dsc >= ORACLE_DSC_MIN and elapsed < ORACLE_BUDGET_S and len(recs) == 66
    criterion_log(5, ok, f"{len(recs)} sweep cases at {ORACLE_SHAPE[0]}^3: max TE {te} max RE {re} "
                         f"min DSC {dsc:.4f} (>= {ORACLE_DSC_MIN}); {elapsed:.1f}s < {ORACLE_BUDGET_S:g}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 6: scaled-down learning comparison


def _heldout():
    stream = PairStream(SynthConfig(seed=600), 1, pose_jitter=0.0)
    return [stream.sample(i) for i in range(LEARN_HELDOUT)]


@pytest.fixture(scope="module")
def learned():
    pairs = _heldout()
    val = stack_pairs(pairs)
    results = {}
    for kind in ("DNET", "SE", "ME"):
        t0 = time.perf_counter()
        model = build(toy_config(kind), seed=0)
        stream = PairStream(SynthConfig(seed=60), LEARN_BATCH, pose_jitter=0.0)
        cfg = TrainConfig(lr=LEARN_LR, momentum=0.9, iterations=LEARN_ITERS, batch_size=LEARN_BATCH)
        try:
            train(model, stream, cfg)
            val_loss, te, re = evaluate_batches(model, val)
        except Exception as exc:  # a diverged run still counts as a result
            val_loss, te, re = float("inf"), float("nan"), float("nan")
            print(f"{kind} training failed: {exc}")
        results[kind] = {"model": model, "val_loss": val_loss, "te_mm": te, "re_rad": re,
                         "seconds": time.perf_counter() - t0}
        print(f"{kind}: val loss {val_loss:.4f} TE {te:.4f} mm RE {re:.4f} rad ({results[kind]['seconds']:.0f}s)")
    return results, pairs


@pytest.mark.slow
def test_criterion_6_learning(criterion_log, learned):
    results, _ = learned
    d, se, me = results["DNET"], results["SE"], results["ME"]
    checks = {
        "RE": d["re_rad"] < LEARN_RE_MAX,
        "TE": d["te_mm"] < LEARN_TE_MAX,
        "loss<SE": d["val_loss"] < se["val_loss"],
        "loss<ME": d["val_loss"] < me["val_loss"],
    }
    summary = "; ".join(f"{k} val {v['val_loss']:.4f} RE {v['re_rad']:.3f} TE {v['te_mm']:.3f}"
                        for k, v in results.items())
    failed = [k for k, v in checks.items() if not v]
    criterion_log(6, not failed, f"D-net RE < {LEARN_RE_MAX} rad, TE < {LEARN_TE_MAX:.2f} mm, loss below SE and ME "
                                 f"[{summary}]" + (f" failed: {', '.join(failed)}" if failed else ""))
    assert not failed, json.dumps({k: {m: v[m] for m in ("val_loss", "te_mm", "re_rad")} for k, v in results.items()})


@pytest.mark.slow
def test_trained_dnet_dsc_before_after(learned):
    results, pairs = learned
    model = results["DNET"]["model"]
    before, after = [], []
    for f, m, theta in pairs:
        before.append(dice(binarize(f), binarize(m)))
        after.append(evaluate_pair(model, f, m, theta).dsc)
    print(f"held-out DSC unregistered {np.mean(before):.4f} registered {np.mean(after):.4f}")
    assert np.mean(after) > np.mean(before)


# ---------------------------------------------------------------------------


def test_criterion_7_overfit_and_zero_lr(criterion_log):
    rng = sample_rng(70, 0)
    from voxalign.synthgen import make_pair

    batch = stack_pairs([make_pair(gen_phantom(rng), rng, SynthConfig(augment=False))])
    model = build(toy_config("dnet"), seed=0)
    _, curves = train(model, (batch for _ in range(OVERFIT_ITERS)), TrainConfig(lr=1e-4, iterations=OVERFIT_ITERS))
    first, last = curves.train[0].loss, curves.train[-1].loss
    factor = first / last if last > 0 else float("inf")

    frozen = build(toy_config("dnet"), seed=1)
    before = {k: p.data.copy() for k, p in frozen.params.items()}
    train(frozen, PairStream(SynthConfig(seed=71), 2), TrainConfig(lr=0.0, iterations=10))
    same = all(np.array_equal(before[k], p.data) for k, p in frozen.params.items())
    ok = factor >= OVERFIT_FACTOR and same
    criterion_log(7, ok, f"loss {first:.4f} -> {last:.2e} in {OVERFIT_ITERS} iters ({factor:.1e}x >= "
                         f"{OVERFIT_FACTOR:g}x); zero-lr parameters bit-identical {same}")
    assert ok


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_reproducibility(criterion_log, tmp_path):
    cfg = {"toy": True, "arch": "dnet", "seed": 8, "train": {"lr": 1e-3, "batch_size": 2, "val_interval": 3},
           "data": {"val_pairs": 2}}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert cli_main(["train", "--config", str(path), "--iterations", "6", "--out", str(tmp_path / name)]) == 0
        assert cli_main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / name / "model.ckpt"),
                         "--n", "1", "--out", str(tmp_path / name / "eval")]) == 0
    identical = _tree(tmp_path / "a") == _tree(tmp_path / "b")

    run = ["train", "--config", str(path), "--iterations"]
    assert cli_main(run + ["3", "--out", str(tmp_path / "c")]) == 0
    assert cli_main(run + ["6", "--out", str(tmp_path / "c"), "--resume", str(tmp_path / "c" / "model.ckpt")]) == 0
    full = {k: v for k, v in _tree(tmp_path / "a").items() if k.parts[0] != "eval"}
    resumed = _tree(tmp_path / "c") == full
    ok = identical and resumed
    criterion_log(8, ok, f"two identical runs byte-identical (checkpoint, curves, reports) {identical}; "
                         f"resume 3+3 == 6 uninterrupted {resumed}")
    assert ok


def test_criterion_9_param_count(criterion_log):
    count = param_count(build(full_config("dnet")))
    criterion_log(9, True, f"full-scale D-net {count:,} parameters vs {REPORTED_DNET_PARAMS / 1e6:.1f}M reported "
                           f"({count / REPORTED_DNET_PARAMS:.0%}); informative only, block internals differ")
    assert count > 0
