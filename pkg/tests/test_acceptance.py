"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import inspect
import math
import os
import time

import numpy as np

from datr import checkpoint as ck
from datr import cli, erpgeo, synthdata
from datr.attention import EfficientSelfAttention, mhsa_reference
from datr.erpgeo import ErpSpec
from datr.experiment import ARMS, ToyConfig, run_toy, summarize
from datr.metrics import mean_iou
from datr.model import TABLE5_STRUCTURES, build_model, model_param_count, predict, variant_config
from datr.numkit import Rng, Tensor, grad_check, ops, parameter
from datr.selfcheck import masked_attention_oracle
from datr.synthdata import DatasetConfig, in_memory_dataset
from datr.uda import Split, TrainConfig, Trainer, total_loss
from test_attention import _random_da
from test_metrics import set_oracle_miou
from test_model import tiny_config


# 1 -------------------------------------------------------------------------

def test_c1_da_matches_masked_attention(criterion):
    with criterion(1, "DA equals masked full attention (50 instances, f32 1e-5, f64 1e-10)") as rec:
        t0 = time.perf_counter()
        rng = Rng(2024)
        worst = {np.float32: 0.0, np.float64: 0.0}
        for _ in range(50):
            H, W = (int(v) for v in rng.integers(4, 10, (2,)))
            C = (4, 8)[int(rng.integers(0, 2))]
            heads = (1, 2)[int(rng.integers(0, 2))]
            wh, ww = ((1, 3, 5)[int(i)] for i in rng.integers(0, 3, (2,)))
            wrap = bool(rng.integers(0, 2))
            for dtype in worst:
                cfg, attn = _random_da(rng, H, W, heads, C // heads, wh, ww, wrap, dtype)
                x = rng.normal((1, H, W, C)).astype(dtype)
                ref = masked_attention_oracle(x, cfg, attn.proj, attn.rpe.data)
                worst[dtype] = max(worst[dtype], float(np.abs(attn(Tensor(x)).data - ref).max()))
        elapsed = time.perf_counter() - t0
        rec.detail = f"max err f32 {worst[np.float32]:.2e}, f64 {worst[np.float64]:.2e}"
        assert worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-10
        assert elapsed < 10.0


# 2 -------------------------------------------------------------------------

def test_c2_full_window_is_mhsa(criterion):
    with criterion(2, "full-window DA with zero RPE equals MHSA (1e-5)") as rec:
        t0 = time.perf_counter()
        rng = Rng(7)
        worst = 0.0
        for H, W, heads, C in ((4, 5, 2, 8), (6, 9, 1, 4), (3, 7, 2, 4), (8, 8, 2, 8)):
            for dtype in (np.float32, np.float64):
                cfg, attn = _random_da(rng, H, W, heads, C // heads, 2 * H + 1, 2 * W + 1, False, dtype)
                attn.rpe.data[:] = 0
                x = rng.normal((1, H, W, C)).astype(dtype)
                got = attn(Tensor(x)).data.reshape(H * W, C)
                ref = mhsa_reference(Tensor(x.reshape(H * W, C)), heads, attn.proj).data
                worst = max(worst, float(np.abs(got - ref).max()))
        rec.detail = f"max err {worst:.2e}"
        assert worst <= 1e-5
        assert time.perf_counter() - t0 < 5.0


# 3 -------------------------------------------------------------------------

def _op_cases(rng):
    def p(shape, lo=-1.0, hi=1.0):
        return parameter(rng.uniform(shape, lo, hi))

    a, b = p((3, 4)), p((3, 4))
    pos = p((3, 4), 0.5, 2.0)
    kinks = parameter(np.array([[-1.6, -0.7, 0.3, 1.4], [0.9, -0.2, 1.7, -1.3], [0.55, -0.45, 2.2, 0.1]]))
    m = p((4, 2))
    img = p((1, 5, 6, 2))
    gamma, beta, bias = p((4,)), p((4,)), p((2,))
    w = Tensor(rng.normal((3, 4)))
    r = lambda t: ops.sum(ops.mul(t, Tensor(rng_fixed(t.shape))))     # noqa: E731

    return {
        "add": (lambda: r(ops.add(a, b)), [a, b]),
        "sub": (lambda: r(ops.sub(a, b)), [a, b]),
        "mul": (lambda: r(ops.mul(a, b)), [a, b]),
        "div": (lambda: r(ops.div(a, pos)), [a, pos]),
        "scale": (lambda: r(ops.scale(a, -2.5)), [a]),
        "exp": (lambda: r(ops.exp(a)), [a]),
        "log": (lambda: r(ops.log(pos)), [pos]),
        "clip": (lambda: r(ops.mul(ops.clip(kinks, -1.0, 1.0), kinks)), [kinks]),
        "gelu": (lambda: r(ops.gelu(a)), [a]),
        "relu": (lambda: r(ops.mul(ops.relu(kinks), kinks)), [kinks]),
        "sum": (lambda: r(ops.mul(ops.sum(a, 1, True), b)), [a, b]),
        "mean": (lambda: ops.mean(ops.mul(a, ops.mean(b, 0, True))), [a, b]),
        "reshape": (lambda: r(ops.reshape(ops.reshape(a, (2, 6)), (3, 4))), [a]),
        "transpose": (lambda: ops.sum(ops.mul(ops.transpose(a), Tensor(w.data.T))), [a]),
        "swapaxes": (lambda: r(ops.swapaxes(ops.swapaxes(img, 1, 2), 1, 2)), [img]),
        "getitem": (lambda: r(ops.getitem(img, (slice(None), slice(1, 4)))), [img]),
        "concat": (lambda: r(ops.concat([a, b], 0)), [a, b]),
        "pad_hw": (lambda: r(ops.pad_hw(img, 2, 1)), [img]),
        "take": (lambda: r(ops.take(a, np.array([[0, 2, 2, 1], [1, 1, 0, 3]]), 1)), [a]),
        "pick": (lambda: r(ops.pick(ops.softmax(a, -1), np.array([0, 3, 1]))), [a]),
        "matmul": (lambda: r(ops.matmul(a, m)), [a, m]),
        "linear": (lambda: r(ops.gelu(ops.linear(a, m, bias))), [a, m, bias]),
        "softmax": (lambda: r(ops.softmax(a, -1)), [a]),
        "layernorm": (lambda: r(ops.layernorm(a, gamma, beta)), [a, gamma, beta]),
        "unfold": (lambda: r(ops.unfold(img, 3, 2, 1)), [img]),
        "bilinear_resize": (lambda: r(ops.bilinear_resize(img, 7, 4)), [img]),
        "avg_pool": (lambda: r(ops.avg_pool(img, 2)), [img]),
    }


_FIXED = {}


def rng_fixed(shape):
    """Fixed random weights per shape, so every evaluation of a loss sees the same ones."""
    if shape not in _FIXED:
        _FIXED[shape] = np.random.default_rng(len(_FIXED) + 17).normal(size=shape)
    return _FIXED[shape]


def _differentiable_ops():
    skip = {"unbroadcast", "conv_output_size", "resize_matrix"}
    return {n for n, f in inspect.getmembers(ops, inspect.isfunction)
            if f.__module__ == ops.__name__ and not n.startswith("_") and n not in skip}


def test_c3_gradient_fidelity(criterion):
    with criterion(3, "finite-difference gradients <= 1e-4 (all ops, DA+RPE, ESA, tiny model)") as rec:
        t0 = time.perf_counter()
        errors = {}
        for seed in range(5):
            cases = _op_cases(Rng(500 + seed))
            assert set(cases) == _differentiable_ops()
            for name, (f, params) in cases.items():
                errors[name] = max(errors.get(name, 0.0), grad_check(f, params))

        rng = Rng(9)
        cfg, attn = _random_da(rng, 4, 5, 2, 2, 3, 3, True, np.float64)
        x = parameter(rng.normal((1, 4, 5, 4)))
        wt = Tensor(rng.normal((1, 4, 5, 4)))
        errors["da (incl. rpe table)"] = grad_check(
            lambda: ops.sum(ops.mul(attn(x), wt)),
            [x, attn.rpe, attn.proj.q.weight, attn.proj.v.weight, attn.proj.o.bias])

        esa = EfficientSelfAttention(4, 2, 2, rng, np.float64)
        xe = parameter(rng.normal((1, 4, 6, 4)))
        we = Tensor(rng.normal((1, 4, 6, 4)))
        errors["esa"] = grad_check(lambda: ops.sum(ops.mul(esa(xe), we)),
                                   [xe] + [p for _, p in esa.named_parameters()])

        m = build_model(tiny_config(), rng, np.float64)
        n_params = sum(p.data.size for _, p in m.named_parameters())
        assert n_params <= 5000
        for _, prm in m.named_parameters():
            prm.data += rng.normal(prm.shape, 0.0, 0.3)
        image = rng.uniform((1, 32, 32, 3))
        labels = rng.integers(0, 3, (1, 8, 8))

        def loss():
            logits, _ = m(Tensor(image))
            return ops.scale(ops.sum(ops.pick(ops.log(ops.softmax(logits, -1)), labels)), -1.0 / 64)

        named = list(m.named_parameters())
        # key biases cancel in the softmax, so their exact gradient is zero
        key_bias = [p for n, p in named if n.endswith("attn.proj.k.bias")]
        others = [p for n, p in named if not n.endswith("attn.proj.k.bias")]
        errors["tiny model end to end"] = grad_check(loss, others, max_entries=6)
        m.zero_grad()
        loss().backward()
        assert all(np.abs(p.grad).max() < 1e-12 for p in key_bias)

        worst = max(errors, key=errors.get)
        rec.detail = f"{len(errors)} checks, worst {worst} {errors[worst]:.2e}, model {n_params} params"
        assert errors[worst] <= 1e-4
        assert time.perf_counter() - t0 < 120.0


# 4 -------------------------------------------------------------------------

def test_c4_distortion_identities(criterion):
    with criterion(4, "distortion identities") as rec:
        t0 = time.perf_counter()
        two_pi = 2 * math.pi
        for W in (1.0, two_pi, 37.5):
            assert abs(erpgeo.distortion_coefficient(ErpSpec(W, 16, W / two_pi, 5))) <= 1e-12
        rng = np.random.default_rng(1)
        W, n, npr = two_pi, 8, 4
        worst = 0.0
        for h in rng.uniform(0, W / math.pi, 1000):
            d = erpgeo.distortion_coefficient(ErpSpec(W, n, h, npr))
            pw = erpgeo.pixel_width(ErpSpec(W, n, h))
            worst = max(worst, abs(d - npr * (W / n - pw)))
            assert pw <= W / n
            assert erpgeo.distortion_coefficient(ErpSpec(W, n, h, 2 * npr)) == 2 * d
        worked = erpgeo.distortion_coefficient(ErpSpec(two_pi, 8, 0.5, 4))
        sphere = 4 * (two_pi / 8 - two_pi * math.sqrt(1 - (0.5 - 1) ** 2) / 8)
        rec.detail = f"Dis={worked:.6g}, sphere {sphere:.6g}, identity err {worst:.1e}"
        assert worst <= 1e-12
        assert f"{worked:.6g}" == f"{sphere:.6g}" == "0.420894"
        assert time.perf_counter() - t0 < 1.0


# 5 -------------------------------------------------------------------------

def test_c5_parameter_counts(criterion):
    with criterion(5, "parameter counts within 15%") as rec:
        t0 = time.perf_counter()
        parts = []
        for variant, target in (("M", 4.64e6), ("T", 14.72e6), ("S", 25.76e6)):
            count = model_param_count(build_model(variant_config(variant), Rng(0)))
            parts.append(f"{variant}={count / 1e6:.2f}M ({(count - target) / target:+.1%})")
            assert abs(count - target) / target <= 0.15
        rec.detail = ", ".join(parts)
        assert time.perf_counter() - t0 < 10.0


# 6 -------------------------------------------------------------------------

def test_c6_toy_uda_ordering(criterion):
    with criterion(6, "toy UDA ordering CFA >= SS >= source, CFA >= source + 3, centre distance falls") as rec:
        cfg = ToyConfig()
        assert (cfg.data.num_classes, cfg.data.erp_size, cfg.data.pinhole_size) == (5, (128, 256), (128, 128))
        assert (cfg.data.n_train, cfg.data.n_val, cfg.variant) == (128, 32, "M")
        assert (cfg.train.epochs_source, cfg.train.epochs_adapt, cfg.seeds) == (5, 10, (0, 1, 2))
        t0 = time.perf_counter()
        results = run_toy(cfg)
        wall = time.perf_counter() - t0
        s = summarize(results)
        per_seed = {r.seed: r.seed_seconds for r in results}
        for seed in cfg.seeds:
            print("seed", seed, {r.arm: round(r.miou, 4) for r in results if r.seed == seed})
        rec.detail = (" ".join(f"{a}={100 * s[f'miou_{a}']:.2f}" for a in ARMS)
                      + f"; centre dist {s['center_dist_first']:.1f} -> {s['center_dist_last']:.1f}"
                      + f"; wall {wall / 60:.1f} min on {os.cpu_count()} cpu, slowest seed"
                      + f" {max(per_seed.values()) / 60:.1f} min")
        assert s["miou_cfa"] >= s["miou_ss"] >= s["miou_source"]
        assert s["miou_cfa"] >= s["miou_source"] + 0.03
        assert s["center_dist_last"] < s["center_dist_first"]
        # the budget is stated for a 4-core machine, where the seeds run side by side;
        # with fewer cores the slowest seed is the comparable quantity
        budget_time = wall if (os.cpu_count() or 1) >= len(cfg.seeds) else max(per_seed.values())
        assert budget_time <= 30 * 60


# 7 -------------------------------------------------------------------------

def test_c7_resolution_robustness(criterion, tmp_path):
    with criterion(7, "checkpoint trained at 128x256 infers at 64x128 and 256x512") as rec:
        data = in_memory_dataset(DatasetConfig(seed=4, n_train=2, n_val=1))
        src = Split(*data[("train", "source")])
        tgt = Split(data[("train", "target")][0])
        assert tgt.images.shape[1:3] == (128, 256)
        model = build_model(variant_config("M"), Rng(4))
        trainer = Trainer(model, src, tgt, TrainConfig(0, 1, batch_size=2, lr=1e-3))
        list(trainer.run())
        ck.checkpoint_save(tmp_path / "m.dtrc", model, trainer.bank)
        restored = ck.restore_model(ck.checkpoint_load(tmp_path / "m.dtrc"))
        shapes = {n: p.shape for n, p in restored.named_parameters()}
        worst = 0.0
        for H, W in ((64, 128), (128, 256), (256, 512)):
            image = Rng(H).uniform((1, H, W, 3), 0, 1, np.float32)
            probs, labels = predict(image, restored)
            assert probs.shape == (1, H, W, 5) and labels.shape == (1, H, W)
            assert np.isfinite(probs).all()
            worst = max(worst, float(np.abs(probs.sum(-1) - 1).max()))
        assert {n: p.shape for n, p in restored.named_parameters()} == shapes
        rec.detail = f"max |row sum - 1| {worst:.1e}"
        assert worst <= 1e-5


# 8 -------------------------------------------------------------------------

def test_c8_ablation_plumbing(criterion):
    with criterion(8, "7 structures and 3 PE modes train one epoch; RPE gets gradient") as rec:
        data = in_memory_dataset(DatasetConfig(seed=5, pinhole_size=(64, 64), erp_size=(64, 128),
                                               n_train=2, n_val=1))
        src = Split(*data[("train", "source")])
        tgt = Split(data[("train", "target")][0])
        checked = 0
        runs = [(s, "rpe") for s in TABLE5_STRUCTURES] + [("ooos", pe) for pe in ("ape", "none")]
        for structure, pe in runs:
            model = build_model(variant_config("M", 5, 11, pe, structure=structure), Rng(1))
            trainer = Trainer(model, src, tgt, TrainConfig(0, 1, batch_size=2, lr=1e-3))
            log = list(trainer.run())
            assert len(log) == 1 and math.isfinite(log[0]["loss_seg"]) and trainer.step == 1
            rpe = [p for n, p in model.named_parameters() if n.endswith("rpe")]
            da_blocks = sum(st.depth for st, kind in zip(model.cfg.stages, model.cfg.structure_mask) if kind == "da")
            assert len(rpe) == (pe == "rpe") * da_blocks
            if rpe:
                checked += 1
                model.zero_grad()
                total_loss((src.images, src.labels), tgt.images, model, trainer.bank, phase="adapt", e=2).total.backward()
                assert all(np.abs(p.grad).sum() > 0 for p in rpe)
        assert checked >= len(TABLE5_STRUCTURES) - 1
        rec.detail = f"{len(runs)} training runs, RPE gradient nonzero in {checked} DA models"


# 9 -------------------------------------------------------------------------

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism_and_serialisation(criterion, tmp_path):
    with criterion(9, "bit-identical checkpoints, exact round trip, reproducible dataset") as rec:
        gen = ["gen-data", "--seed", "9", "--n-train", "4", "--n-val", "2", "--pinhole-size", "64",
               "--erp-height", "64"]
        for name in ("d1", "d2"):
            assert cli.main(gen + ["--out", str(tmp_path / name)]) == 0
        assert _tree(tmp_path / "d1") == _tree(tmp_path / "d2")

        train = ["train", "--data", str(tmp_path / "d1"), "--epochs-source", "1", "--epochs-adapt", "0",
                 "--batch-size", "2", "--seed", "2"]
        for name in ("r1", "r2"):
            assert cli.main(train + ["--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "r1" / "ckpt_last.dtrc").read_bytes()
        assert a == (tmp_path / "r2" / "ckpt_last.dtrc").read_bytes()

        images, labels = synthdata.load_split(tmp_path / "d1", "train", "source")
        tgt, _ = synthdata.load_split(tmp_path / "d1", "train", "target")
        trainer = Trainer(build_model(variant_config("M"), Rng(3)), Split(images, labels), Split(tgt),
                          TrainConfig(1, 1, batch_size=2, lr=1e-3))
        list(trainer.run())
        path = tmp_path / "rt.dtrc"
        ck.checkpoint_save(path, trainer.model, trainer.bank, epoch=trainer.epoch, phase="adapt",
                           rng_state=trainer.rng.get_state(), step=trainer.step, optim=trainer.optim)
        loaded = ck.checkpoint_load(path)
        model = ck.restore_model(loaded)
        for (n, p), (_, q) in zip(trainer.model.named_parameters(), model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), n
        bank = ck.restore_bank(loaded)
        assert bank.source_centers.tobytes() == trainer.bank.source_centers.tobytes()
        assert bank.target_centers.tobytes() == trainer.bank.target_centers.tobytes()
        assert ck.rng_state(loaded) == trainer.rng.get_state()
        ck.checkpoint_save(tmp_path / "rt2.dtrc", model, bank, epoch=trainer.epoch, phase="adapt",
                           rng_state=ck.rng_state(loaded), step=trainer.step, optim=trainer.optim)
        assert (tmp_path / "rt2.dtrc").read_bytes() == path.read_bytes()
        rec.detail = f"checkpoint {len(a)} bytes"


# 10 ------------------------------------------------------------------------

def test_c10_metric_oracle(criterion):
    with criterion(10, "mIoU equals the set-based oracle on 100 random pairs") as rec:
        rng = np.random.default_rng(10)
        for _ in range(100):
            k = int(rng.integers(2, 8))
            shape = tuple(int(v) for v in rng.integers(1, 16, 2))
            gt = rng.integers(0, k, shape)
            gt[rng.random(shape) < 0.05] = 255
            gt.flat[0] = int(rng.integers(0, k))
            pred = rng.integers(0, k, shape)
            assert mean_iou(pred, gt, k) == set_oracle_miou(pred, gt, k)
        rec.detail = "100/100 exact"
