"""Acceptance criteria, one test each; every test prints a single ACCEPT line.

Run with ``pytest tests/test_acceptance.py -v`` to see the lines (they are
printed with capture disabled).
"""

import time

import numpy as np
import pytest

from mpcmnet.checks import amplification_draws, amplification_holds, bench_ratio, run_gradchecks
from mpcmnet.data import (
    FormatError,
    SceneConfig,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    generate_scene,
)
from mpcmnet.decoder import MPCMNet
from mpcmnet.encoder import Encoder, sla, sla_weights, stage_shape
from mpcmnet.layers import ConvSpec, StripConv, conv2d, phi
from mpcmnet.losses import LossConfig, dice_loss, joint_loss, one_hot
from mpcmnet.metrics import confusion_accumulate, metrics
from mpcmnet.oracles import (
    direct_conv_oracle,
    scan_2d_oracle,
    sequential_scan_oracle,
    sla_oracle,
    strip_dense_oracle,
)
from mpcmnet.scan import ScanParams, scan, selective_scan_1d, selective_scan_2d
from mpcmnet.tensor import Tensor, precision
from mpcmnet.train import (
    CheckpointError,
    TrainConfig,
    build_model,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    load_tensors,
    save_tensors,
    train_loop,
)


@pytest.fixture
def report(capsys):
    def emit(number, name, passed, detail):
        with capsys.disabled():
            print(f"\nACCEPT {number:>2} {name:<22} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return emit


def test_01_gradient_suite(report):
    t = time.perf_counter()
    reports = run_gradchecks()
    elapsed = time.perf_counter() - t
    failed = [r.op for r in reports if not r.passed]
    block = max(r.max_rel for r in reports if r.op != "grad:full_net_16x16")
    net = next(r.max_rel for r in reports if r.op == "grad:full_net_16x16")
    ok = not failed and block < 1e-4 and net < 1e-3 and elapsed < 180
    assert report(1, "gradient suite", ok,
                  f"{len(reports)} checks, worst block rel {block:.1e} (<1e-4), net rel {net:.1e} (<1e-3), "
                  f"{elapsed:.1f}s (<180s) failed={failed}")


def test_02_sla_algebra(report):
    r = np.random.default_rng(2)
    worst = 0.0
    with precision("float64"):
        for _ in range(1000):
            n, d = int(r.integers(1, 24)), int(r.integers(1, 9))
            q, k = phi(Tensor(r.standard_normal((n, d)))).data, phi(Tensor(r.standard_normal((n, d)))).data
            w = sla_weights(q @ k.T)
            worst = max(worst, float(np.abs(w.sum(axis=-1) - 1).max()))
        # the linear-time form applies exactly these weights
        q, k, v = (phi(Tensor(r.standard_normal((1, 12, 4)))), phi(Tensor(r.standard_normal((1, 12, 4)))),
                   Tensor(r.standard_normal((1, 12, 3))))
        linear_gap = float(np.abs(sla(q, k, v).data[0] - sla_weights(q.data[0] @ k.data[0].T) @ v.data[0]).max())
    cases, rejected = amplification_draws(1000, seed=2)
    held = sum(amplification_holds(*c) for c in cases)
    ok = worst < 1e-12 and linear_gap < 1e-12 and held == 1000
    assert report(2, "SLA algebra", ok,
                  f"weight-sum err {worst:.1e} (<1e-12), amplification {held}/1000 "
                  f"(sign-stable draws; {rejected} pole-crossing draws rejected)")


def test_03_complexity(report):
    t = time.perf_counter()
    _, _, sla_ratio = bench_ratio("sla", 1024, repeats=15)
    _, _, soft_ratio = bench_ratio("softmax", 1024, repeats=15)
    elapsed = time.perf_counter() - t
    ok = sla_ratio < 5.5 and soft_ratio > 10 and elapsed < 60
    assert report(3, "complexity", ok,
                  f"SLA T(4N)/T(N) {sla_ratio:.2f} (<5.5), softmax {soft_ratio:.2f} (>10) at N=1024, {elapsed:.1f}s")


def test_04_oracle_equivalence(report):
    r = np.random.default_rng(4)
    worst = {}
    with precision("float64"):
        for i in range(10):
            groups = (1, 2, 4)[i % 3]
            spec = ConvSpec(4, 8, 3, 1 + i % 2, i % 3, groups)
            x, w, b = (r.standard_normal((2, 4, 7, 6)), r.standard_normal(spec.weight_shape),
                       r.standard_normal(8))
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
            want = direct_conv_oracle(x, w, b, spec.stride, spec.padding, groups)
            worst["conv"] = max(worst.get("conv", 0), float(np.abs(got - want).max()))

            k = (7, 11, 21)[i % 3]
            m = StripConv(3, k, rng=r)
            x = r.standard_normal((1, 3, 9, 12))
            want = strip_dense_oracle(x, m.w_row.data, m.b_row.data, m.w_col.data, m.b_col.data)
            worst["strip"] = max(worst.get("strip", 0), float(np.abs(m(Tensor(x)).data - want).max()))

            args = (r.standard_normal((2, 6, 3)), r.uniform(0.05, 0.8, (2, 6, 3)), -r.uniform(0.2, 2, (3, 4)),
                    r.standard_normal((2, 6, 4)), r.standard_normal((2, 6, 4)), r.standard_normal(3))
            gap = np.abs(scan(*[Tensor(a) for a in args]).data - sequential_scan_oracle(*args)).max()
            p = ScanParams(3, 2, rng=r)
            seq = r.standard_normal((2, 5, 3))
            delta, bm, cm = (t.data for t in p.project(Tensor(seq)))
            ref = sequential_scan_oracle(seq, delta, p.decay().data, bm, cm, p.skip.data)
            gap = max(gap, np.abs(selective_scan_1d(Tensor(seq), p).data - ref).max())
            worst["scan1d"] = max(worst.get("scan1d", 0), float(gap))

            img = r.standard_normal((2, 3, 3, 4))
            ref = scan_2d_oracle(img, lambda s: tuple(t.data for t in p.project(Tensor(s))),
                                 p.decay().data, p.skip.data)
            worst["scan2d"] = max(worst.get("scan2d", 0), float(np.abs(selective_scan_2d(Tensor(img), p).data - ref).max()))

            q, kk, v = r.standard_normal((16, 8)), r.standard_normal((16, 8)), r.standard_normal((16, 4))
            got = sla(phi(Tensor(q[None])), phi(Tensor(kk[None])), Tensor(v[None])).data[0]
            worst["sla"] = max(worst.get("sla", 0), float(np.abs(got - sla_oracle(q, kk, v)).max()))
    ok = all(v < 1e-10 for v in worst.values())
    assert report(4, "oracle equivalence", ok,
                  ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (each <1e-10, 10 cases)")


def test_05_shape_contract(report):
    mismatches = []
    for c0, h, batch in ((8, 32, 2), (16, 64, 2), (64, 512, 1)):
        with precision("float32"):
            enc = Encoder(c0, rng=np.random.default_rng(0))
            if batch == 1:
                enc.eval()  # shape-only configuration: one image, running statistics
            feats = enc(Tensor(np.random.default_rng(1).uniform(size=(batch, 3, h, h))))
        for i, f in enumerate(feats, start=1):
            if f.shape != (batch,) + stage_shape(i, c0, h, h):
                mismatches.append((c0, h, i, f.shape))
    net = MPCMNet(8, rng=np.random.default_rng(0))
    out = net(Tensor(np.zeros((2, 3, 64, 64))))
    ok = not mismatches and out.shape == (2, 4, 64, 64)
    assert report(5, "shape contract", ok,
                  f"f_i = 2^(i-1)C0 x H/2^i for (8,32), (16,64), (64,512 shape-only); mismatches={mismatches}")


def test_06_loss_metric_exactness(report):
    r = np.random.default_rng(6)
    labels = r.integers(0, 4, (2, 8, 8))
    with precision("float64"):
        perfect = joint_loss(Tensor(one_hot(labels, 4, np.float64)), labels).item()
        dice_range = []
        for _ in range(1000):
            logits = r.standard_normal((1, 4, 4, 4)) * r.uniform(0.1, 10)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            dice_range.append(dice_loss(Tensor(e / e.sum(axis=1, keepdims=True)), r.integers(0, 4, (1, 4, 4))).item())
    pm = metrics(confusion_accumulate(labels, labels))
    toy = metrics(confusion_accumulate(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1])))[2]
    hand = (1 / 2 + 2 / 3 + 1 + 1) / 4
    ok = perfect < 1e-6 and pm == (1.0, 1.0, 1.0) and 0 <= min(dice_range) and max(dice_range) <= 1 \
        and abs(toy - hand) < 1e-15
    assert report(6, "loss/metric exactness", ok,
                  f"perfect joint {perfect:.1e}, P/R/MIoU {pm}, dice in [{min(dice_range):.3f}, {max(dice_range):.3f}], "
                  f"toy MIoU {toy:.6f} vs hand {hand:.6f}")


@pytest.mark.slow
def test_07_overfit_smoke(report):
    train = [generate_scene(SceneConfig(size=64), 1000 + i) for i in range(8)]
    cfg = TrainConfig(c0=8, lr=1e-2, batch_size=4, epochs=300, lr_decay_every=50, augment=False,
                      early_stop_patience=300, seed=0)
    assert cfg.loss_config() == LossConfig(0.6, 0.4, 0.25, 0.2, 1e-5)
    t = time.perf_counter()
    state = train_loop(build_model(cfg), train, train, cfg, log=lambda line: None)
    elapsed = time.perf_counter() - t
    curve = [h["val_miou"] for h in state.history]
    first = next((h["epoch"] for h in state.history if h["val_miou"] >= 0.95), None)
    ok = curve[-1] >= 0.95 and elapsed < 900
    assert report(7, "overfit smoke", ok,
                  f"train MIoU {curve[-1]:.4f} after {len(curve)} epochs (>=0.95; first reached at epoch {first}), "
                  f"{elapsed:.0f}s (<900s)")


@pytest.mark.slow
def test_08_generalization(report):
    size = SceneConfig(size=64)
    train = [generate_scene(size, 10_000 + i) for i in range(200)]
    val = [generate_scene(size, 20_000 + i) for i in range(25)]
    held_out = [generate_scene(size, 30_000 + i) for i in range(50)]
    cfg = TrainConfig(c0=8, batch_size=8, epochs=40, early_stop_patience=10, seed=0)
    t = time.perf_counter()
    model = build_model(cfg)
    state = train_loop(model, train, val, cfg, log=lambda line: None)
    _, cm = evaluate(model, held_out, cfg)
    p, rec, miou = metrics(cm)
    elapsed = time.perf_counter() - t
    ok = miou >= 0.70 and elapsed < 3600
    assert report(8, "generalization", ok,
                  f"held-out MIoU {miou:.4f} (>=0.70), P {p:.3f}, R {rec:.3f}, {len(state.history)} epochs, "
                  f"{elapsed:.0f}s (<3600s)")


def test_09_determinism_and_resume(report, tmp_path):
    train = [generate_scene(SceneConfig(size=32), i) for i in range(4)]
    val = [generate_scene(SceneConfig(size=32), 50 + i) for i in range(2)]
    cfg = TrainConfig(c0=8, batch_size=2, crop_size=32, epochs=4, state_dim=2, seed=9)

    def run(out=None, state=None, model=None, max_epochs=None):
        lines = []
        model = model or build_model(cfg)
        train_loop(model, train, val, cfg, out_dir=out, state=state, log=lines.append, max_epochs=max_epochs)
        return model, lines

    model_a, log_a = run()
    _, log_b = run()
    run(out=tmp_path, max_epochs=2)
    model_r, state_r, _ = checkpoint_load(tmp_path / "last")
    model_r, log_r = run(state=state_r, model=model_r)
    same_params = all(a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(model_a.state_items(), model_r.state_items()))
    ok = log_a == log_b and log_r == log_a[2:] and same_params
    assert report(9, "determinism & resume", ok,
                  f"repeat logs identical={log_a == log_b}, resumed epochs 2-3 identical={log_r == log_a[2:]}, "
                  f"final parameters bit-equal={same_params}")


def test_10_io_round_trips(report, tmp_path):
    cfg = TrainConfig(c0=8, state_dim=2)
    model = build_model(cfg)
    checkpoint_save(tmp_path / "ck", model, None, cfg)
    loaded, _, _ = checkpoint_load(tmp_path / "ck")
    ckpt_exact = all(a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(model.state_items(), loaded.state_items()))

    s = generate_scene(SceneConfig(size=64), 3)
    img_err = float(np.abs(decode_ppm(encode_ppm(s.image)) - s.image).max())
    lab_exact = np.array_equal(decode_pgm(encode_pgm(s.labels)), s.labels)

    errors = 0
    for bad in (b"P5\n2 2\n255\n" + bytes(12), b"P6\n2\n", b"P6\n2 2\n255\n" + bytes(3)):
        try:
            decode_ppm(bad)
        except FormatError as e:
            errors += "at byte" in str(e)
    save_tensors(tmp_path / "t", [("w", np.ones(8, np.float32))])
    blob = (tmp_path / "t" / "weights.bin").read_bytes()
    (tmp_path / "t" / "weights.bin").write_bytes(blob[:-4])
    try:
        load_tensors(tmp_path / "t")
    except CheckpointError as e:
        errors += "'w'" in str(e)
    ok = ckpt_exact and img_err <= 1 / 255 and lab_exact and errors == 4
    assert report(10, "I/O round trips", ok,
                  f"checkpoint bit-exact={ckpt_exact}, image err {img_err:.2e} (<=1/255), labels exact={lab_exact}, "
                  f"malformed inputs rejected with location {errors}/4")
