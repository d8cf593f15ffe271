"""Acceptance suite: one PASS/FAIL line per criterion, listed again at the
end of the pytest run. Run directly with ``python3 tests/test_acceptance.py``
to see the lines without pytest's capture."""

import json
import time

import numpy as np
import pytest

from hmbpan import classical as cl
from hmbpan import hmcnn, isodata, metrics
from hmbpan import losses as L
from hmbpan import raster as rs
from hmbpan import tensor as T
from hmbpan import training as tr
from hmbpan.cli import main as cli_main

import metric_oracles as O
from conftest import report
from gradcheck import numeric_grad, rel_error


def _perturbed(cfg, seed=0, sd=0.1):
    """Initial weights plus noise, so the zero-initialized tails take part."""
    r = np.random.default_rng(seed)
    return {k: v + r.normal(0, sd, v.shape) for k, v in hmcnn.init_params(cfg, seed).items()}


# -- 1 -------------------------------------------------------------------------

def test_1_gradient_correctness():
    # the whole two-stage network with every block present, at a width that
    # lets every scalar parameter be differenced inside the time budget
    cfg = hmcnn.HmcnnConfig(n_res_blocks=1, feat_channels=4, attention_hidden=2, f_res_blocks=1)
    r = np.random.default_rng(0)
    params = _perturbed(cfg)
    lrms, pan, hrms = r.uniform(0, 1, (1, 4, 16, 16)), r.uniform(0, 1, (1, 1, 64, 64)), r.uniform(0, 1, (1, 4, 64, 64))
    phi = L.FeatureExtractor()
    weights = L.LossWeights(alpha=1e-3)

    def loss(p, grad=False):
        t = hmcnn.as_tensors(p, grad)
        x2, x4 = hmcnn.forward(T.constant(lrms), T.constant(pan), t, cfg)
        return t, L.total_loss(x2, x4, hrms, phi, weights)

    t0 = time.perf_counter()
    tensors, value = loss(params, True)
    T.backward(value)
    errors = {}
    for name in params:
        numeric = numeric_grad(lambda p: float(loss(p)[1].values), params, name, eps=1e-5)
        errors[name] = rel_error(tensors[name].grad, numeric)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    n = sum(v.size for v in params.values())
    ok = errors[worst] < 1e-4 and elapsed < 300
    report(1, "gradient correctness", ok,
           f"{n} scalars in {len(params)} tensors, worst rel err {errors[worst]:.2e} ({worst}), {elapsed:.0f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------

def test_2_metric_oracles():
    r = np.random.default_rng(2)
    names = ("rmse", "rmae", "ergas", "sam", "uiqi", "d_lambda", "d_s", "qnr")
    worst = dict.fromkeys(names, 0.0)
    spent = 0.0
    for _ in range(100):
        ref = r.uniform(50, 2000, (4, 16, 16))
        fused = ref + r.normal(0, 60, ref.shape)
        lrms = r.uniform(50, 2000, (4, 4, 4))
        pan = r.uniform(50, 2000, (1, 16, 16))
        t = time.perf_counter()
        rep = metrics.evaluate_all(fused, ref, lrms, pan, s=4)
        spent += time.perf_counter() - t
        got = dict(zip(names, (rep.rmse, rep.rmae, rep.ergas, rep.sam_degrees, rep.uiqi,
                               rep.d_lambda, rep.d_s, rep.qnr)))
        want = dict(rmse=O.rmse(fused, ref), rmae=O.rmae(fused, ref), ergas=O.ergas(fused, ref, 4),
                    sam=O.sam(fused, ref), uiqi=O.uiqi(fused, ref), d_lambda=O.d_lambda(fused, lrms),
                    d_s=O.d_s(fused, lrms, pan, 4), qnr=O.qnr(fused, lrms, pan, 4))
        for k in names:
            worst[k] = max(worst[k], abs(got[k] - want[k]) / abs(want[k]))
    top = max(worst.values())
    ok = top < 1e-10 and spent < 10
    report(2, "metric oracle equivalence", ok,
           f"100 pairs, worst rel err {top:.1e} ({max(worst, key=worst.get)}), metrics time {spent:.2f}s")
    assert ok


# -- 3 -------------------------------------------------------------------------

def test_3_best_value_vector():
    # every band a copy of a textured PAN: fused equals the reference, and
    # inter-band and band-to-PAN similarity are the same at both resolutions
    _, pan = rs.synthesize_scene(64, 64, seed=8)
    ref = np.repeat(pan.data, 4, axis=0)
    lrms = rs.resample_array(ref, 16, 16)
    rep = metrics.evaluate_all(ref, ref, lrms, pan.data, s=4)
    vector = rep.best_value_vector()
    exact = vector == (0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0)
    # a realistic multispectral scene for the reference-based part
    hrms, _ = rs.synthesize_scene(64, 64, seed=9)
    ref_part = metrics.evaluate_all(hrms, hrms).best_value_vector()[:5] == (0.0, 0.0, 0.0, 0.0, 1.0)
    r = np.random.default_rng(3)
    noisy = metrics.evaluate_all(ref + r.normal(0, 20, ref.shape), ref, lrms, pan.data, s=4)
    consistent = abs(noisy.qnr - (1 - noisy.d_lambda) * (1 - noisy.d_s)) <= 1e-12
    table = metrics.qnr(0.0163, 0.0698)
    ok = exact and ref_part and consistent and abs(table - 0.9150) <= 1e-3
    report(3, "best-value vector", ok,
           f"perfect fusion -> {tuple(float(v) for v in vector)}, QNR identity {consistent}, "
           f"(1-0.0163)(1-0.0698) = {table:.4f}")
    assert ok


# -- 4 -------------------------------------------------------------------------

def test_4_hmb_invariants():
    t0 = time.perf_counter()
    cfg = hmcnn.HmcnnConfig()
    params = _perturbed(cfg, sd=0.02)
    tensors = hmcnn.as_tensors(params)
    r = np.random.default_rng(4)
    lrms = r.uniform(0, 1, (1, 4, 16, 16))

    const = hmcnn.forward(T.constant(lrms), T.constant(np.full((1, 1, 64, 64), 0.42)), tensors, cfg,
                          return_parts=True)
    zero = all(np.all(const[k].values == 0.0) for k in ("resid_x2", "resid_x4"))

    pan = r.uniform(0, 1, (1, 1, 64, 64))
    parts = hmcnn.forward(T.constant(lrms), T.constant(pan), tensors, cfg, return_parts=True)
    bounded = True
    for key, pan_s in (("resid_x2", rs.resample_array(pan, 32, 32)), ("resid_x4", pan)):
        p_hat = np.abs(hmcnn.pan_highpass(pan_s, 2))
        mag = np.abs(parts[key].values)
        bounded &= bool(np.all(mag >= p_hat) and np.all(mag <= 2 * p_hat))

    # the fused output is, bit for bit, the feature path plus an independent
    # evaluation of the block; undoing the sum by subtraction can only differ
    # by the rounding of that sum
    additive = True
    slack = 0.0
    for stage, key, pan_s in ((1, "x2", rs.resample_array(pan, 32, 32)), (2, "x4", pan)):
        block = hmcnn.hmb_fuse(parts[f"feat_{key}"], T.constant(pan_s), tensors, stage, cfg, 2).values
        fused, feat = parts[f"fused_{key}"].values, parts[f"feat_{key}"].values
        additive &= block.tobytes() == parts[f"resid_{key}"].values.tobytes()
        additive &= (feat + block).tobytes() == fused.tobytes()
        slack = max(slack, float(np.max(np.abs((fused - feat) - block) / np.spacing(np.abs(fused)))))
    elapsed = time.perf_counter() - t0
    ok = zero and bounded and additive and slack <= 1 and elapsed < 60
    report(4, "HMB invariants", ok,
           f"constant PAN zero residual {zero}, |X| in [|P|,2|P|] {bounded}, fused == feat + HMB bitwise "
           f"{additive} (subtraction within {slack:.0f} ulp), {elapsed:.1f}s")
    assert ok


# -- 5 -------------------------------------------------------------------------

SMOKE_MODEL = hmcnn.HmcnnConfig(n_res_blocks=2, feat_channels=8, attention_hidden=8)


def _smoke_data():
    hrms, pan = rs.synthesize_scene(384, 384, seed=11)
    entries = list(rs.crop_patches(hrms, pan, 64, 64, 4))
    train, held = entries[:32], entries[32]
    arrays = [np.stack([hmcnn.normalize(getattr(e, part).data, getattr(e, part).value_range) for e in train])
              for part in ("lrms", "pan", "hrms")]
    return arrays, held


def test_5_smoke_training():
    (lrms, pan, hrms), held = _smoke_data()
    cfg = tr.TrainConfig(batch_size=4, lr0=1e-3, max_steps=200, max_epochs=1000, seed=0, model=SMOKE_MODEL)
    initial = tr.dataset_loss(hmcnn.init_params(SMOKE_MODEL, 0), lrms, pan, hrms, cfg)
    t0 = time.perf_counter()
    run = tr.train_model(lrms, pan, hrms, cfg)
    elapsed = time.perf_counter() - t0
    final = tr.dataset_loss(run.params, lrms, pan, hrms, cfg)
    fused = hmcnn.predict(held.lrms, held.pan, run.params, SMOKE_MODEL)
    net_rmse = metrics.rmse(fused, held.hrms)[0]
    bic_rmse = metrics.rmse(rs.upsample(held.lrms, 4), held.hrms)[0]
    again = tr.train_model(lrms, pan, hrms, cfg)
    same = again.step_losses == run.step_losses and all(
        again.params[k].tobytes() == run.params[k].tobytes() for k in run.params)
    ok = final < 0.5 * initial and net_rmse < bic_rmse and elapsed < 900 and same
    report(5, "smoke training", ok,
           f"32 patches, 200 steps: loss {initial:.4g} -> {final:.4g} (ratio {final / initial:.3f}), held-out RMSE "
           f"{net_rmse:.2f} vs bicubic {bic_rmse:.2f}, {elapsed:.0f}s, rerun identical {same}")
    assert ok


# -- 6 -------------------------------------------------------------------------

def test_6_classical():
    t0 = time.perf_counter()
    hrms, pan_hr = rs.synthesize_scene(256, 256, seed=6)
    lrms, pan = rs.wald_degrade(hrms, pan_hr, 4)
    fin = cl.FusionInput(lrms, pan, 4)
    up = rs.resample_array(lrms.data, pan.height, pan.width)

    out = cl.brovey_fuse(fin).data
    ratio_err = float(np.max(np.abs(out / out.sum(axis=0) - up / up.sum(axis=0))))

    a = cl.sfim_fuse(fin).data
    b = cl.sfim_fuse(cl.FusionInput(lrms, pan.with_data(3.7 * pan.data), 4)).data
    sfim_scale = float(np.max(np.abs(a - b) / np.abs(a)))

    # zero injection: PAN equal to the upsampled intensity (IHS, Brovey, GS),
    # a constant PAN for SFIM
    intensity = rs.Raster(up.mean(axis=0)[None], (rs.BandRole.PAN,), pan.value_range)
    zero_err = {}
    for name in ("ihs", "brovey", "gs"):
        zero_err[name] = float(np.max(np.abs(cl.METHODS[name](cl.FusionInput(lrms, intensity, 4)).data - up)))
    flat = pan.with_data(np.full_like(pan.data, 700.0))
    zero_err["sfim"] = float(np.max(np.abs(cl.sfim_fuse(cl.FusionInput(lrms, flat, 4)).data - up)))
    elapsed = time.perf_counter() - t0
    zero_ok = all(v <= 1e-10 * lrms.span for v in zero_err.values())
    ok = ratio_err <= 1e-10 and sfim_scale <= 1e-12 and zero_ok and elapsed < 60
    report(6, "classical fusion", ok,
           f"Brovey ratio err {ratio_err:.1e}, SFIM PAN-scaling rel change {sfim_scale:.1e}, zero-injection max err "
           f"{max(zero_err.values()):.1e}, {elapsed:.1f}s")
    assert ok


# -- 7 -------------------------------------------------------------------------

def test_7_isodata():
    img = np.full((3, 16, 16), 200.0)
    img[:, :, 8:] = 1500.0
    truth = np.zeros((16, 16), int)
    truth[:, 8:] = 1
    two = isodata.classify(rs.Raster(img), isodata.IsodataParams(k_init=2))
    recovered = two.k_final == 2 and isodata.agreement(two.labels, truth) == 1.0

    const = isodata.classify(rs.Raster(np.full((4, 12, 12), 321.0)))
    single = const.k_final == 1 and np.all(const.labels == 0)

    hrms, _ = rs.synthesize_scene(128, 128, seed=7)
    lm = isodata.classify(hrms)
    steps = {}
    for it, step, sse in lm.sse_trace:
        steps.setdefault(it, {})[step] = sse
    monotone = all(s["update"] <= s["assign"] for s in steps.values() if "update" in s)
    p = isodata.IsodataParams()
    defaults = (p.k_init, p.max_iter) == (5, 5)
    ok = recovered and single and monotone and defaults
    report(7, "ISODATA", ok,
           f"two-cluster recovery {recovered}, constant image -> {const.k_final} class, SSE non-increasing over "
           f"{len(lm.sse_trace)} steps {monotone}, defaults k={p.k_init} iters={p.max_iter}")
    assert ok


# -- 8 -------------------------------------------------------------------------

def test_8_roundtrips(tmp_path):
    hrms, pan = rs.synthesize_scene(64, 64, seed=12)
    rs.write_raster(hrms, tmp_path / "h.mbr")
    back = rs.read_raster(tmp_path / "h.mbr")
    raster_ok = (back.data.tobytes() == hrms.data.tobytes() and back.band_roles == hrms.band_roles
                 and back.value_range == hrms.value_range)

    cfg = SMOKE_MODEL
    params = _perturbed(cfg, sd=0.02)
    T.save_weights(params, tmp_path / "w.hmw")
    loaded = T.load_weights(tmp_path / "w.hmw")
    weights_ok = list(loaded) == list(params) and all(
        loaded[k].tobytes() == params[k].tobytes() and loaded[k].shape == params[k].shape for k in params)

    lrms = rs.downsample(hrms, 4)
    before = hmcnn.predict(lrms, pan, params, cfg)
    after = hmcnn.predict(lrms, pan, tmp_path / "w.hmw", cfg)
    predict_ok = before.data.tobytes() == after.data.tobytes()
    ok = raster_ok and weights_ok and predict_ok
    report(8, "round-trips", ok, f"MBR1 bitwise {raster_ok}, HMW1 bitwise {weights_ok}, predict after reload "
                                 f"bitwise {predict_ok}")
    assert ok


# -- 9 -------------------------------------------------------------------------

def test_9_cli_training_determinism(tmp_path):
    assert cli_main(["synth", "--width", "128", "--height", "128", "--seed", "3",
                     "--out-dir", str(tmp_path / "scene"), "--quiet"]) == 0
    assert cli_main(["degrade", "--hrms", str(tmp_path / "scene/hrms.mbr"), "--pan", str(tmp_path / "scene/pan.mbr"),
                     "--patch", "64", "--out-dir", str(tmp_path / "ds"), "--quiet"]) == 0
    (tmp_path / "run.cfg").write_text(
        "model.n_res_blocks = 2\nmodel.feat_channels = 8\nmodel.attention_hidden = 8\n"
        "train.batch_size = 2\ntrain.max_steps = 12\ntrain.lr0 = 1e-3\ntrain.checkpoint_every = 2\n"
        f"data.index = {tmp_path / 'ds/index.json'}\n"
    )
    manifests, weights = [], []
    for name in ("a", "b"):
        rc = cli_main(["--config", str(tmp_path / "run.cfg"), "--seed", "21", "train",
                       "--out-dir", str(tmp_path / name), "--quiet"])
        assert rc == 0
        manifests.append(json.loads((tmp_path / name / "manifest.json").read_text()))
        weights.append((tmp_path / name / "weights.hmw").read_bytes())
    curves = manifests[0]["step_losses"] == manifests[1]["step_losses"]
    epochs = manifests[0]["epoch_losses"] == manifests[1]["epoch_losses"]
    checkpoints = all((tmp_path / "a" / c).read_bytes() == (tmp_path / "b" / c).read_bytes()
                      for c in manifests[0]["artifacts"]["checkpoints"])
    ok = curves and epochs and weights[0] == weights[1] and checkpoints and manifests[0]["seed"] == 21
    report(9, "training determinism", ok,
           f"{len(manifests[0]['step_losses'])} steps twice with seed 21: loss curves identical {curves and epochs}, "
           f"weight files identical {weights[0] == weights[1]}, checkpoints identical {checkpoints}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
