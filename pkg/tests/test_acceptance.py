"""Acceptance gates, one test per criterion.

Each test records a ``PASS``/``FAIL`` line; the lines are printed together at
the end of the pytest run. Run this file alone with
``pytest tests/test_acceptance.py -s`` to see them as they happen.
"""
import gc
import json
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from fastpowerformer.attention import hash_keys, lsh_attention, track_cost
from fastpowerformer.cli import main
from fastpowerformer.data import prepare, synth_schema, synth_wind
from fastpowerformer.fecam import dct_basis, dct_channel
from fastpowerformer.model import ModelConfig, build_model
from fastpowerformer.revnet import AttentionSublayer, FeedForward, RevBlockState, RevLayer, chunked_ffn
from fastpowerformer.tensor import Tape, Tensor, mean, memory, mul, no_tape, square
from fastpowerformer.train import TrainConfig, mape_with_count, mae, mse, persistence_baseline, train

import gradcheck
import oracles

RESULTS: dict[int, str] = {}


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- 1 -----------------------------------------------------------------------

def _model_gradcheck(cfg, n_per_tensor=4, seed=0):
    """Worst relative error of tape vs central-difference gradients of a scalar model loss.

    Every input entry is checked; parameters are sampled ``n_per_tensor`` entries each.
    """
    r = np.random.default_rng(seed)
    model = build_model(cfg)
    x = r.standard_normal((1, cfg.seq_len, cfg.n_channels))
    w = r.standard_normal((1, cfg.pred_len))
    params = model.parameters()
    xt = Tensor(x)
    with Tape() as tape:
        tape.watch(xt, params)
        g = tape.backward(mean(mul(model(xt).y_hat, Tensor(w))))

    def loss():
        with no_tape():
            return float(np.mean(model(x).y_hat.data * w))

    def fd(setter, base, idx, h=1e-6):
        arr = base.copy()
        arr[idx] += h
        setter(arr)
        up = loss()
        arr[idx] -= 2 * h
        setter(arr)
        down = loss()
        setter(base)
        return (up - down) / (2 * h)

    def set_x(arr):
        x[...] = arr

    x0 = x.copy()
    worst = oracles.rel_error(g[xt], np.array([fd(set_x, x0, i) for i in np.ndindex(x.shape)]).reshape(x.shape))
    for p in params:
        flat = [np.unravel_index(i, p.shape) for i in r.choice(p.data.size, min(n_per_tensor, p.data.size), replace=False)]
        num = np.array([fd(p.assign, p.data.copy(), i) for i in flat])
        ana = np.array([g[p][i] for i in flat])
        worst = max(worst, oracles.rel_error(ana, num))
    return worst


def test_criterion_1_gradients(toy_config):
    t0 = time.perf_counter()
    op_worst = {name: gradcheck.check(fn, arrays) for name, fn, arrays in gradcheck.op_cases()}
    e2e = _model_gradcheck(toy_config)
    secs = time.perf_counter() - t0
    name, worst = max(op_worst.items(), key=lambda kv: kv[1])
    ok = worst < 1e-4 and e2e < 1e-3 and secs < 60
    record(1, ok, f"{len(op_worst)} ops worst {worst:.2e} ({name}); end-to-end {e2e:.2e}; {secs:.1f}s")


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_reversibility():
    worst = 0.0
    for trial in range(100):
        r = np.random.default_rng(trial)
        width = int(r.choice([2, 4, 8]))
        L = int(r.integers(1, 17))
        kind = "lsh" if trial % 2 == 0 else "dense"
        layer = RevLayer(AttentionSublayer(width, r, kind=kind, seed=trial), FeedForward(width, 4 * width, r, chunk=3))
        x = r.standard_normal((2, L, 2 * width)) * r.uniform(0.1, 5)
        with no_tape():
            rec = layer.inverse(layer.forward(RevBlockState.split(Tensor(x)))).merge().data
        worst = max(worst, float(np.max(np.abs(rec - x))))
    record(2, worst <= 1e-10, f"100 trials, max |x - inverse(forward(x))| = {worst:.2e}")


# -- 3 -----------------------------------------------------------------------

def test_criterion_3_lsh():
    worst_lsh = worst_single = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        L = int(r.integers(1, 17))
        x = r.standard_normal((2, L, 4))
        v = r.standard_normal((2, L, 3))
        got = lsh_attention(Tensor(x), Tensor(x), Tensor(v), n_buckets=4, n_rounds=3, seed=seed).data
        assigns = hash_keys(x, 4, 3, seed)
        for b in range(2):
            want = oracles.pooled_attention(x[b], x[b], v[b], assigns[b].codes)
            worst_lsh = max(worst_lsh, float(np.max(np.abs(got[b] - want))))
        q, k = r.standard_normal((2, L, 4)), r.standard_normal((2, L, 4))
        one = lsh_attention(Tensor(q), Tensor(k), Tensor(v), n_buckets=1).data
        worst_single = max(worst_single, float(np.max(np.abs(one - oracles.dense_attention(q, k, v)))))
    ok = worst_lsh <= 1e-10 and worst_single <= 1e-12
    record(3, ok, f"pooled oracle {worst_lsh:.2e}; single bucket vs dense {worst_single:.2e}")


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_dct():
    parts = []
    ok = True
    for L in (8, 64, 128):
        basis = dct_basis(L)
        m = basis.matrix
        ortho = float(np.max(np.abs(m @ m.T - np.eye(L))))
        v = np.random.default_rng(L).standard_normal((3, L))
        got = np.concatenate([dct_channel(Tensor(v[i : i + 1]), basis).data for i in range(3)])
        parseval = float(np.max(np.abs(np.sum(got ** 2, axis=1) - np.sum(v ** 2, axis=1))))
        naive = max(float(np.max(np.abs(got[i] - oracles.dct_cosine_sum(v[i])))) for i in range(3))
        ok &= max(ortho, parseval, naive) <= 1e-10
        parts.append(f"L={L} ortho {ortho:.1e} parseval {parseval:.1e} naive {naive:.1e}")
    record(4, ok, "; ".join(parts))


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_metrics():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(r.integers(1, 64))
        y, p = r.standard_normal(n) * 10, r.standard_normal(n) * 10
        m, k = mape_with_count(y, p)
        om, ok_ = oracles.mape(y, p)
        assert k == ok_
        worst = max(worst, abs(mse(y, p) - oracles.mse(y, p)), abs(mae(y, p) - oracles.mae(y, p)),
                    abs(m - om) / max(1.0, abs(om)))
    y = np.array([0.0, 3.0, 0.0, 0.0, 5.0, 2.0])
    p = np.array([1.0, 2.0, 0.5, 0.0, 5.0, 3.0])
    m, k = mape_with_count(y, p)
    om, _ = oracles.mape(y, p)
    ok = worst <= 1e-12 and k == 3 and abs(m - om) <= 1e-12
    record(5, ok, f"100 vectors worst {worst:.1e}; zero-target fixture excluded {k} of 3, MAPE {m:.6f}")


# -- 6 -----------------------------------------------------------------------

def _entries(cfg):
    x = np.random.default_rng(0).standard_normal((1, cfg.seq_len, cfg.n_channels))
    with no_tape(), track_cost() as cost:
        build_model(cfg)(x)
    return cost.score_entries


def _model_backprop_peak(cfg):
    model = build_model(cfg)
    r = np.random.default_rng(1)
    x = r.standard_normal((4, cfg.seq_len, cfg.n_channels))
    y = r.standard_normal((4, cfg.pred_len))
    params = model.parameters()
    gc.collect()
    base = memory.live
    memory.reset_peak()
    with Tape() as tape:
        tape.watch(params)
        tape.backward(mean(square(model(x).y_hat - Tensor(y))))
    return memory.peak - base


def test_criterion_6_efficiency():
    T, C = 288, 16
    ratios = {}
    for kind, nb in (("dense", 4), ("lsh", 1)):
        base = ModelConfig(seq_len=T, pred_len=8, n_channels=C, d_model=16, d_h=16, n_layers=1,
                           use_lstm=False, use_fecam=False, attention=kind, n_buckets=nb)
        time_e = _entries(replace(base, use_transpose=False))
        var_e = _entries(base)
        ratios[f"{kind}{'' if nb > 1 else ' 1-bucket'}"] = Fraction(var_e, time_e)
    a_ok = all(v == Fraction(C, T) ** 2 for v in ratios.values())

    cfg = ModelConfig(seq_len=64, pred_len=8, n_channels=4, d_model=32, d_h=16, n_layers=4, chunk=16)
    rev = _model_backprop_peak(cfg)
    stored = _model_backprop_peak(replace(cfg, reversible=False))
    b_ok = rev < stored

    r = np.random.default_rng(2)
    x = Tensor(r.standard_normal((3, 37, 8)))
    w1, b1, w2, b2 = (Tensor(r.standard_normal(s)) for s in ((8, 32), (32,), (32, 8), (8,)))
    with no_tape():
        ref = chunked_ffn(x, 37, w1, b1, w2, b2).data
        c_ok = all(np.array_equal(chunked_ffn(x, c, w1, b1, w2, b2).data, ref) for c in range(1, 38))

    detail = (f"(a) entry ratios {', '.join(f'{k} {v}' for k, v in ratios.items())} vs (C/T)^2 = {Fraction(C, T) ** 2}; "
              f"(b) peak bytes reversible {rev} < stored {stored}; (c) chunk sizes 1..37 bit-identical {c_ok}")
    record(6, a_ok and b_ok and c_ok, detail)


# -- 7 -----------------------------------------------------------------------

def test_criterion_7_forecasting_gate():
    t0 = time.perf_counter()
    frame = synth_wind(0, 8000)
    ds = prepare(frame, 96, 96, synth_schema(frame))
    cfg = ModelConfig(seq_len=96, pred_len=96, n_channels=ds.n_channels, d_model=128, d_h=32, seed=0)
    report = train(build_model(cfg), ds, TrainConfig(epochs=5, seed=0))
    secs = time.perf_counter() - t0
    base = persistence_baseline(ds.test).mse
    ratio = report.test.mse / base
    ok = ratio <= 0.8 and secs < 15 * 60
    record(7, ok, f"test MSE {report.test.mse:.4f} vs persistence {base:.4f} (ratio {ratio:.3f}); "
                  f"{len(report.epochs)} epochs in {secs / 60:.1f} min")


# -- 8 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def synth_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("accept") / "farm.csv"
    assert main(["synth", "--out", str(path), "--rows", "800", "--seed", "5"]) == 0
    return path


def test_criterion_8_ablation_shape(synth_csv, tmp_path):
    out = tmp_path / "ablate"
    code = main(["ablate", "--config", "configs/toy.toml", "--data", str(synth_csv), "--out", str(out)])
    import csv

    with open(out / "ablation.csv", newline="") as fh:
        rows = {r["ID"]: r for r in csv.DictReader(fh)}
    matrix = [(k, r["transpose"] + r["fecam"] + r["lstm"]) for k, r in rows.items()]
    want = [("I", "000"), ("II", "110"), ("III", "101"), ("IV", "011"), ("V", "111")]
    finite = all(np.isfinite(float(r[c])) for r in rows.values() for c in ("MSE", "MAE", "MAPE", "MSE_MW", "MAE_MW"))
    e1, e5 = int(rows["I"]["score_entries"]), int(rows["V"]["score_entries"])
    p1, p5 = int(rows["I"]["peak_bytes"]), int(rows["V"]["peak_bytes"])
    ok = code == 0 and matrix == want and finite and e1 > e5 and p1 > p5
    record(8, ok, f"rows {' '.join(f'{k}={m}' for k, m in matrix)}; finite {finite}; "
                  f"entries I {e1} > V {e5}; peak I {p1} > V {p5}")


# -- 9 -----------------------------------------------------------------------

def test_criterion_9_reproducibility(synth_csv, tmp_path):
    texts = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", "configs/toy.toml", "--data", str(synth_csv), "--out", str(out)]) == 0
        texts.append((out / "train_report.jsonl").read_bytes())
    manifests = [json.loads((tmp_path / r / "manifest.json").read_text()) for r in ("a", "b")]
    same_manifest = manifests[0] == manifests[1]
    ok = same_manifest and texts[0] == texts[1]
    record(9, ok, f"identical manifests {same_manifest}; reports {len(texts[0])} bytes, byte-identical {texts[0] == texts[1]}")
