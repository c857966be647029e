"""Built-in oracle suite run by ``datr selfcheck``.

Every check compares a production code path against an independent,
deliberately naive implementation and reports the worst error next to the
tolerance it was held to.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import erpgeo
from .attention import (
    QKVO,
    DaConfig,
    DistortionAwareAttention,
    EfficientSelfAttention,
    mhsa_reference,
    neighborhood_indices,
)
from .model import build_model, model_param_count, variant_config
from .numkit import ops
from .numkit.gradcheck import grad_check
from .numkit.nn import Linear, parameter
from .numkit.rng import Rng
from .numkit.tensor import Tensor

FAULTS = ("rpe-shape",)
PARAM_TARGETS = {"M": 4.64e6, "T": 14.72e6, "S": 25.76e6}


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tol: float
    detail: str = ""
    seconds: float = 0.0


# -- naive oracles ---------------------------------------------------------

def masked_attention_oracle(x: np.ndarray, cfg: DaConfig, p: QKVO, rpe: np.ndarray | None) -> np.ndarray:
    """Per-pixel loop: full attention logits, everything outside the window masked to -inf."""
    b, H, W, C = x.shape
    heads, d = cfg.heads, cfg.d_head
    as64 = lambda lin: (lin.weight.data.astype(np.float64), lin.bias.data.astype(np.float64))
    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = as64(p.q), as64(p.k), as64(p.v), as64(p.o)
    x = x.astype(np.float64)
    out = np.zeros((b, H, W, C))
    kw = min(cfg.window_w, W)
    for n in range(b):
        flat = x[n].reshape(H * W, C)
        q, k, v = flat @ wq + bq, flat @ wk + bk, flat @ wv + bv
        for i in range(H):
            for j in range(W):
                nbrs = neighborhood_indices(i, j, H, W, cfg)
                mask = np.full(H * W, -np.inf)
                pe = np.zeros((H * W, heads, d))
                for t, (r, c) in enumerate(nbrs):
                    mask[r * W + c] = 0.0
                    if rpe is not None:
                        pe[r * W + c] = rpe[:, (t // kw) * cfg.window_w + t % kw, :]
                res = np.zeros(C)
                for h in range(heads):
                    sl = slice(h * d, (h + 1) * d)
                    logits = k[:, sl] @ q[i * W + j, sl] / math.sqrt(d) + mask
                    w = np.exp(logits - logits.max())
                    w /= w.sum()
                    res[sl] = w @ (v[:, sl] + pe[:, h, :])
                out[n, i, j] = res @ wo + bo
    return out


def mhsa_oracle(x: np.ndarray, heads: int, p: QKVO) -> np.ndarray:
    """Dense multi-head attention over a ``(N, C)`` sequence, one head at a time."""
    w = {n: (getattr(p, n).weight.data.astype(np.float64), getattr(p, n).bias.data.astype(np.float64))
         for n in "qkvo"}
    x = x.astype(np.float64)
    q, k, v = (x @ w[n][0] + w[n][1] for n in "qkv")
    d = x.shape[-1] // heads
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        a = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        a = np.exp(a - a.max(axis=1, keepdims=True))
        out[:, sl] = (a / a.sum(axis=1, keepdims=True)) @ v[:, sl]
    return out @ w["o"][0] + w["o"][1]


# -- checks ----------------------------------------------------------------

def _check_da_oracle(fault: str | None):
    rng = Rng(101)
    worst = 0.0
    for trial in range(6):
        H, W = (int(v) for v in rng.integers(4, 9, (2,)))
        heads = 1 + trial % 2
        cfg = DaConfig(3 + 2 * (trial % 2), 3, heads, 4, "rpe", trial % 3 == 0)
        attn = DistortionAwareAttention(cfg, rng, np.float64)
        if fault == "rpe-shape":
            attn.rpe = parameter(attn.rpe.data[:, :-1, :])
        x = rng.normal((1, H, W, cfg.channels))
        got = attn(Tensor(x)).data
        ref = masked_attention_oracle(x, cfg, attn.proj, attn.rpe.data)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst, "6 random maps, f64"


def _check_full_window():
    rng = Rng(102)
    H, W, heads, d = 5, 6, 2, 4
    cfg = DaConfig(2 * H + 1, 2 * W + 1, heads, d, "none")
    attn = DistortionAwareAttention(cfg, rng, np.float64)
    x = rng.normal((1, H, W, heads * d))
    got = attn(Tensor(x)).data.reshape(H * W, -1)
    ref = mhsa_oracle(x.reshape(H * W, -1), heads, attn.proj)
    return float(np.abs(got - ref).max()), f"{H}x{W}, window covers map"


def _check_esa_r1():
    rng = Rng(103)
    esa = EfficientSelfAttention(8, 2, 1, rng, np.float64)
    x = rng.normal((1, 4, 5, 8))
    got = esa(Tensor(x)).data.reshape(20, 8)
    ref = mhsa_oracle(x.reshape(20, 8), 2, esa.proj)
    return float(np.abs(got - ref).max()), "reduction 1 is plain MHSA"


def _check_mhsa_impl():
    rng = Rng(104)
    p = QKVO(8, rng, np.float64)
    x = rng.normal((7, 8))
    return float(np.abs(mhsa_reference(Tensor(x), 2, p).data - mhsa_oracle(x, 2, p)).max()), "N=7, C=8"


def _check_grads(fault: str | None):
    rng = Rng(105)
    worst = 0.0
    lin = Linear(4, 3, rng, dtype=np.float64)
    x = parameter(rng.normal((2, 4)))
    worst = max(worst, grad_check(lambda: ops.sum(ops.mul(lin(x), lin(x))), [x, lin.weight, lin.bias]))
    g = parameter(rng.normal((5,)))
    y = parameter(rng.normal((3, 5)))
    worst = max(worst, grad_check(
        lambda: ops.sum(ops.mul(ops.layernorm(y, g, g, 1e-6), Tensor(np.arange(15.).reshape(3, 5)))), [y, g]))
    s = parameter(rng.normal((2, 6)))
    worst = max(worst, grad_check(lambda: ops.sum(ops.mul(ops.softmax(s, -1), Tensor(np.arange(12.).reshape(2, 6)))), [s]))
    cfg = DaConfig(3, 3, 2, 2, "rpe")
    attn = DistortionAwareAttention(cfg, rng, np.float64)
    if fault == "rpe-shape":
        attn.rpe = parameter(attn.rpe.data[:, :-1, :])
    xm = parameter(rng.normal((1, 4, 4, 4)))
    wts = Tensor(rng.normal((1, 4, 4, 4)))
    worst = max(worst, grad_check(lambda: ops.sum(ops.mul(attn(xm), wts)), [xm, attn.rpe, attn.proj.q.weight]))
    return worst, "linear, layernorm, softmax, DA incl. encoding table (f64)"


def _check_distortion():
    W, n = 2 * math.pi, 8
    eq = abs(erpgeo.distortion_coefficient(erpgeo.ErpSpec(W, n, W / (2 * math.pi), 4)))
    worked = erpgeo.distortion_coefficient(erpgeo.ErpSpec(W, n, 0.5, 4))
    sphere = 4 * (W / n - erpgeo.sphere_row_width(W, n, 0.5))
    rel = abs(worked - sphere) / abs(sphere)
    return max(eq, rel, abs(worked - 0.420894) / 0.420894 * 1e-6), \
        f"Dis(equator)={eq:.1e}, Dis(h=0.5)={worked:.6f} vs sphere {sphere:.6f}"


def _check_params():
    worst, parts = 0.0, []
    for v, target in PARAM_TARGETS.items():
        count = model_param_count(build_model(variant_config(v), Rng(0)))
        dev = abs(count - target) / target
        worst = max(worst, dev)
        parts.append(f"{v}={count / 1e6:.2f}M")
    return worst, ", ".join(parts)


def _check_decoder_fold():
    rng = Rng(106)
    model = build_model(variant_config("M", num_classes=3), rng, np.float64)
    dec = model.decoder
    feats = [Tensor(rng.normal((1, 8 >> i, 16 >> i, c))) for i, c in enumerate((32, 64, 160, 256))]
    return float(np.abs(dec.fused(feats).data - dec.fused_concat(feats).data).max()), "folded vs concat form"


CHECKS = (
    ("da_vs_masked_attention", 1e-10, _check_da_oracle, True),
    ("da_full_window_vs_mhsa", 1e-10, _check_full_window, False),
    ("esa_r1_vs_mhsa", 1e-10, _check_esa_r1, False),
    ("mhsa_vs_dense_loop", 1e-10, _check_mhsa_impl, False),
    ("gradient_checks", 1e-4, _check_grads, True),
    ("distortion_identities", 1e-12, _check_distortion, False),
    ("param_counts_within_15pct", 0.15, _check_params, False),
    ("decoder_fold_vs_concat", 1e-10, _check_decoder_fold, False),
)


def run_selfcheck(fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    results = []
    for name, tol, fn, takes_fault in CHECKS:
        t0 = time.perf_counter()
        try:
            err, detail = fn(fault) if takes_fault else fn()
            ok = bool(err <= tol)
        except Exception as exc:  # a crash is a failed check, reported by name
            err, detail, ok = float("nan"), f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, err, tol, detail, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  {'error':>10}  {'tol':>8}  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.error:>10.3g}  "
                     f"{r.tol:>8.3g}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed"
                 + (f"; failing: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
