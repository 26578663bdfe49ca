"""Acceptance checks; each prints one ``criterion N: PASS|FAIL (...)`` line.

Criteria 5-7 train networks and take several minutes of CPU each.
"""

import json
import math
import os
import time

import numpy as np
import pytest
from conftest import record

from bayeskalman import ad
from bayeskalman.ad import ConcreteDropoutLayer, DenseLayer, DropoutDense, DropoutMode, GRUCell, Tape
from bayeskalman.ad.tape import parameter
from bayeskalman.bkn import bkn_run, ensemble_cov
from bayeskalman.cli import main as cli_main
from bayeskalman.covariance import extract_cov_joseph, extract_cov_update, recover_prior_from_kg
from bayeskalman.ekf import run_ekf
from bayeskalman.experiments import ExperimentConfig, run_bench, run_sweep, strip_timing
from bayeskalman.knet import CholeskyHead, build_network, run_knet
from bayeskalman.linalg import is_psd
from bayeskalman.losses import loss_emp, loss_gnll
from bayeskalman.metrics import anees
from bayeskalman.ssm import generate_dataset, make_canonical_model, make_linear_model, make_pendulum_model
from bayeskalman.train import Batch, loss_bkn


def rows_by_filter(result, snr):
    return {r[1]: r for r in result.rows if r[0] == snr}


# ---------------------------------------------------------------------------
# 1. EKF consistency on the matched canonical model


def test_criterion_1_ekf_consistency():
    start = time.perf_counter()
    model = make_canonical_model(0.0)
    ds = generate_dataset(model, 100, T=100, seed=2024)
    out = run_ekf(model, ds.observations, ds.x0)
    value = anees(out.x - ds.states, out.cov)
    elapsed = time.perf_counter() - start
    ok = 0.85 <= value <= 1.18 and elapsed < 10
    assert record(1, ok, f"ANEES={value:.4f} in [0.85, 1.18], {elapsed:.2f}s"), value


# ---------------------------------------------------------------------------
# 2. Riccati oracle


def riccati_fixed_point(F, H, Q, R, tol=1e-15):
    P = np.eye(F.shape[0])
    for _ in range(100_000):
        prior = F @ P @ F.T + Q
        nxt = prior - prior @ H.T @ np.linalg.solve(H @ prior @ H.T + R, H @ prior)
        if np.max(np.abs(nxt - P)) < tol:
            return nxt
        P = nxt
    return P


def test_criterion_2_riccati_oracle():
    start = time.perf_counter()
    cases = [
        (np.array([[0.9]]), np.array([[1.0]]), np.array([[0.3]]), np.array([[0.5]])),
        (np.array([[1.0, 0.1], [0.0, 0.95]]), np.array([[1.0, 0.0]]), np.diag([0.01, 0.02]), np.array([[0.25]])),
        (np.array([[0.8, 0.3], [-0.2, 0.9]]), np.eye(2), 0.1 * np.eye(2), np.diag([0.5, 2.0])),
    ]
    worst = 0.0
    for F, H, Q, R in cases:
        out = run_ekf(make_linear_model(F, H, Q, R), np.zeros((400, H.shape[0])), np.zeros(F.shape[0]))
        worst = max(worst, float(np.max(np.abs(out.cov[-1] - riccati_fixed_point(F, H, Q, R)))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 1
    assert record(2, ok, f"max |P - P_riccati| = {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 3. gain <-> covariance roundtrip


def test_criterion_3_gain_covariance_roundtrip():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_rt = worst_jos = 0.0
    psd = True
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(m, m + 3))
        H = rng.normal(size=(n, m))
        A, B = rng.normal(size=(m, m)), rng.normal(size=(n, n))
        sigma, R = A @ A.T + 0.5 * np.eye(m), B @ B.T + 0.5 * np.eye(n)
        K = sigma @ H.T @ np.linalg.inv(H @ sigma @ H.T + R)
        rec = recover_prior_from_kg(K, H, R)
        worst_rt = max(worst_rt, np.linalg.norm(rec - sigma) / np.linalg.norm(sigma))
        std, jos = extract_cov_update(K, H, sigma), extract_cov_joseph(K, H, sigma, R)
        worst_jos = max(worst_jos, np.max(np.abs(std - jos)) / max(1.0, np.max(np.abs(std))))
        P = extract_cov_joseph(rng.normal(size=(m, n)) * 10, H, sigma, R)
        psd &= is_psd(P, tol=1e-9 * max(1.0, np.abs(P).max()))
    elapsed = time.perf_counter() - start
    ok = worst_rt < 1e-8 and worst_jos <= 1e-10 and psd and elapsed < 5
    assert record(3, ok, f"roundtrip {worst_rt:.1e}, Joseph-vs-standard {worst_jos:.1e}, "
                         f"Joseph PSD={psd}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 4. gradient correctness


def fd_error(params, loss_fn, rng, eps=1e-6, max_entries=8):
    """Max relative gap between tape gradients and central differences over ``params``."""
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())
    worst = 0.0
    for p in params.values():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = list(np.ndindex(p.data.shape))
        if len(flat) > max_entries:
            flat = [flat[i] for i in rng.choice(len(flat), max_entries, replace=False)]
        num, ana = [], []
        for idx in flat:
            old = p.data[idx]
            p.data[idx] = old + eps
            up = float(ad.data_of(loss_fn()))
            p.data[idx] = old - eps
            dn = float(ad.data_of(loss_fn()))
            p.data[idx] = old
            num.append((up - dn) / (2 * eps))
            ana.append(grad[idx])
        num, ana = np.array(num), np.array(ana)
        worst = max(worst, np.max(np.abs(num - ana)) / max(1e-8, np.max(np.abs(num))))
    return worst


def _dense(rng):
    layer = DenseLayer(4, 3, rng.choice(["identity", "relu", "tanh"]), rng)
    layer.bias.data = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    return layer.named_parameters(), lambda: ad.vsum(ad.square(layer(x)))


def _gru(rng):
    cell = GRUCell(3, 4, rng)
    for p in cell.parameters():
        p.data = rng.normal(size=p.data.shape) * 0.7
    xs = rng.normal(size=(4, 2, 3))

    def loss():
        h = cell.init_hidden((2,))
        for x in xs:
            h = cell(x, h)
        return ad.vsum(ad.square(h))

    return cell.named_parameters(), loss


def _concrete(rng):
    layer = ConcreteDropoutLayer(5, p_init=rng.uniform(0.2, 0.8), temperature=0.5)
    x = parameter(rng.normal(size=(3, 5)))
    u = rng.random((3, 5))
    return {"logit_p": layer.logit_p, "x": x}, lambda: ad.vsum(ad.square(layer(x, None, DropoutMode.TRAIN_RELAXED, u)))


def _dropout_dense(rng):
    layer = DropoutDense(4, 3, "tanh", rng, dropout=True, p_init=rng.uniform(0.2, 0.8), temperature=0.5)
    x = rng.normal(size=(6, 4))
    u = rng.random((6, 4))

    def loss():
        mask = layer.dropout.sample_mask((6,), None, DropoutMode.TRAIN_RELAXED, u)
        return ad.vsum(ad.square(layer(x, mask)))

    return layer.named_parameters(), loss


def _cholesky(rng):
    head = CholeskyHead(5, 3, rng, floor=1e-3)
    for p in head.parameters():
        p.data = rng.normal(size=p.data.shape) * 0.5
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 3))
    return head.named_parameters(), lambda: ad.vsum(head(x) * w)


def _covariance_inputs(rng):
    pred = parameter(rng.normal(size=(2, 3, 2)))
    L = parameter(rng.normal(size=(2, 3, 2, 2)))
    return pred, L, rng.normal(size=(2, 3, 2))


def _emp(rng):
    pred, L, tgt = _covariance_inputs(rng)
    beta = float(rng.uniform(0.1, 1.0))
    return {"pred": pred, "L": L}, lambda: loss_emp(pred, tgt, ad.matmul(L, ad.transpose(L)), beta)


def _gnll(rng):
    pred, L, tgt = _covariance_inputs(rng)
    return {"pred": pred, "L": L}, lambda: loss_gnll(pred, tgt, ad.matmul(L, ad.transpose(L)) + 0.5 * np.eye(2))


def _bkn(rng):
    model = make_canonical_model(0.0)
    ds = generate_dataset(model, 2, T=4, seed=int(rng.integers(2**31)))
    batch = Batch(ds.observations, ds.states, ds.x0, None)
    net = build_network("bkn", 2, 2, rng, hidden=6)
    net.fc_out.dense.weight.data *= 30
    # fully dropped input rows would sit exactly on the relu kink of a zero bias
    net.fc_in.dense.bias.data = rng.normal(size=net.fc_in.dense.bias.data.shape) * 0.3
    net.feat_scale = np.ones(6)
    seed = int(rng.integers(2**31))
    params = net.named_parameters()

    def loss():
        # a fresh generator with the same seed: common random numbers across evaluations
        return loss_bkn(net, model, batch, 0.5, 1e-3, 1e-3, np.random.default_rng(seed), mc_samples=4)

    return params, loss


GRADIENT_CASES = [_dense, _gru, _concrete, _dropout_dense, _cholesky, _emp, _gnll, _bkn]


def test_criterion_4_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, worst_case = 0.0, None
    for k in range(100):
        case = GRADIENT_CASES[k % len(GRADIENT_CASES)]
        params, loss = case(np.random.default_rng(rng.integers(2**32)))
        err = fd_error(params, loss, rng)
        if err > worst:
            worst, worst_case = err, case.__name__.lstrip("_")
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 30
    assert record(4, ok, f"100 configurations, worst relative error {worst:.1e} ({worst_case}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5-7. trained filters


def sweep(doc):
    start = time.perf_counter()
    result = run_sweep(ExperimentConfig.from_dict({"measure_latency": False, **doc}))
    assert not result.errors, result.errors
    return result, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_kalmannet_parity():
    result, elapsed = sweep({"name": "c5", "scenario": "canonical", "snr_db": [0.0], "filters": ["ekf", "knet_kg"],
                             "n_train": 300, "n_test": 100, "seed": 5, "train": {"epochs": 30}})
    rows = rows_by_filter(result, 0.0)
    gap = rows["knet_kg"][2] - rows["ekf"][2]
    ok = gap <= 1.0 and elapsed < 15 * 60
    assert record(5, ok, f"KNet {rows['knet_kg'][2]:.2f} dB vs EKF {rows['ekf'][2]:.2f} dB, "
                         f"gap {gap:+.2f} dB, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_mismatch_ordering():
    snrs = [-10.0, 0.0, 10.0]
    result, elapsed = sweep({"name": "c6", "scenario": "canonical", "snr_db": snrs,
                             "mismatch": {"kind": "process_noise", "factor": 100},
                             "filters": ["ekf", "knet_kg", "bkn"], "n_train": 300, "n_test": 100, "seed": 6})
    details, ok = [], True
    for snr in snrs:
        r = rows_by_filter(result, snr)
        e, k, b = (abs(r[f][3]) for f in ("ekf", "knet_kg", "bkn"))
        ok &= k < e and b < e
        details.append(f"{snr:g} dB: EKF {e:.2f}, KNet {k:.2f}, BKN {b:.2f}")
    assert record(6, ok, "|log10 ANEES| " + "; ".join(details) + f"; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_pendulum_table():
    result, elapsed = sweep({"name": "c7", "scenario": "pendulum", "snr_db": [10.0],
                             "mismatch": {"kind": "measurement_noise", "factor": 100},
                             "filters": ["ekf", "bkn"], "n_train": 300, "n_test": 100, "seed": 7})
    r = rows_by_filter(result, 10.0)
    (e_mse, e_log), (b_mse, b_log) = r["ekf"][2:4], r["bkn"][2:4]
    ok = b_mse <= e_mse - 15 and abs(b_log) < 0.5 and abs(e_log) > 2 and elapsed < 30 * 60
    assert record(7, ok, f"MSE BKN {b_mse:.2f} vs EKF {e_mse:.2f} dB; log10 ANEES BKN {b_log:.3f} "
                         f"vs EKF {e_log:.3f}; {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 8. ensemble algebra


def test_criterion_8_ensemble_algebra():
    start = time.perf_counter()
    zero = ensemble_cov(np.tile([0.3, -1.0], (9, 1)))
    two = ensemble_cov(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    rng = np.random.default_rng(8)
    psd = all(is_psd(ensemble_cov(rng.normal(size=(int(rng.integers(1, 30)), 3)) * 5), tol=1e-12)
              for _ in range(200))
    model = make_pendulum_model(10.0)
    ds = generate_dataset(model, 2, T=20, seed=8)
    net = build_network("bkn", 2, 2, np.random.default_rng(8))
    net.fc_out.dense.weight.data *= 30
    for layer in net.dropout_layers():
        layer.dropout.set_p(0.0)
    freq = run_knet(model, net, ds.observations, ds.x0)
    bayes = bkn_run(model, net, ds.observations, ds.x0, J=5, rng=np.random.default_rng(9), mode="serial")
    exact = np.array_equal(bayes.x, freq.x)
    elapsed = time.perf_counter() - start
    ok = (not zero.any()) and np.array_equal(two, [[1.0, 0.0], [0.0, 0.0]]) and psd and exact and elapsed < 1
    assert record(8, ok, f"zero={not zero.any()}, two-point={two.tolist()}, PSD={psd}, "
                         f"p=0 bit-exact={exact}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 9. latency scaling


def test_criterion_9_latency_scaling():
    J = 20
    cfg = ExperimentConfig.from_dict({"name": "c9", "filters": ["knet_kg", "bkn"], "J": J, "T": 100,
                                      "bench_scenarios": ["canonical", "pendulum"], "snr_db": [0.0],
                                      "latency_repetitions": 15})
    rows = run_bench(cfg)
    details, ok = [], True
    cores = os.cpu_count() or 1
    for scenario in cfg.bench_scenarios:
        lat = {(r[1], r[2]): r[3] for r in rows if r[0] == scenario}
        ratio = lat[("bkn", "serial")] / lat[("knet_kg", "single")]
        ok &= 0.5 * J <= ratio <= 2 * J
        faster = lat[("bkn", "parallel")] < lat[("bkn", "serial")]
        if cores >= 4:
            ok &= faster
        details.append(f"{scenario}: serial/KNet {ratio:.1f}, parallel faster={faster}")
    gate = "parallel gate applied" if cores >= 4 else f"parallel gate not applied on {cores} core(s)"
    assert record(9, ok, "; ".join(details) + f"; {gate}")


# ---------------------------------------------------------------------------
# 10. determinism


COMMANDS = ["generate", "train", "evaluate", "sweep", "single", "bench", "plot"]


def test_criterion_10_determinism(tmp_path):
    doc = {"name": "det", "scenario": "cv", "mismatch": {"kind": "process_noise", "factor": 100},
           "snr_db": [-10.0, 0.0], "filters": ["ekf", "knet_kg", "skn", "blackbox", "bkn"],
           "n_train": 8, "n_test": 4, "T": 10, "J": 4,
           "train": {"epochs": 2, "batch_size": 4, "mc_samples": 2, "val_members": 2}}
    cfg_path = tmp_path / "det.json"
    cfg_path.write_text(json.dumps(doc))
    snapshots = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in COMMANDS:
            extra = []
            if cmd == "plot":
                extra = ["--csv", str(out / "det" / "sweep.csv"), "--x", "snr_db", "--y", "mse_db",
                         "--group", "filter"]
            assert cli_main([cmd, "--config", str(cfg_path), "--out", str(out)] + extra) == 0, cmd
        snapshots.append({p.relative_to(out).as_posix(): strip_timing(p.read_text())
                          for p in sorted(out.rglob("*.csv"))})
    a, b = snapshots
    differing = sorted(k for k in a if a.get(k) != b.get(k))
    ok = bool(a) and a.keys() == b.keys() and not differing
    assert record(10, ok, f"{len(COMMANDS)} commands, {len(a)} CSV files compared, "
                          f"{len(differing)} differ (timing columns excluded)")
