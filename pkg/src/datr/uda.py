"""Training objectives for pinhole-to-panorama adaptation.

* ``seg_loss`` / ``ss_loss``: pixel-mean negative log-likelihood against
  ground-truth or argmax pseudo-labels.
* Class-wise feature aggregation: per-class mean features of each domain
  are mixed into a persistent bank with weight ``1/e`` for the current
  mini-batch (``e`` = adaptation epoch) and pulled together by MSE.
* ``Trainer``: source-only warm-up, then joint adaptation with AdamW and a
  poly learning-rate schedule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import ConfigError
from .metrics import mean_iou
from .model import DATR, predict, upsample_logits
from .numkit import ops
from .numkit.optim import AdamW
from .numkit.rng import Rng
from .numkit.tensor import Tensor

IGNORE = 255
PHASES = ("source_only", "adapt")


class AllIgnoredWarning(UserWarning):
    pass


@dataclass
class PseudoLabelMap:
    labels: np.ndarray
    confidence: np.ndarray


# -- losses ----------------------------------------------------------------

def seg_loss(probs: Tensor, labels: np.ndarray, clamp: float = 1e-12) -> Tensor:
    """Mean ``-log p[label]`` over pixels whose label is not ``IGNORE``."""
    labels = np.asarray(labels)
    valid = labels != IGNORE
    count = int(valid.sum())
    if count == 0:
        warnings.warn("every pixel is ignored; loss defined as 0", AllIgnoredWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=probs.dtype))
    picked = ops.pick(probs, np.where(valid, labels, 0))
    logp = ops.log(ops.clip(picked, clamp, None))
    masked = ops.mul(logp, valid.astype(probs.dtype))
    return ops.scale(ops.sum(masked), -1.0 / count)


def make_pseudo_labels(probs, threshold: float = 0.0) -> PseudoLabelMap:
    """Argmax labels; pixels whose top probability is below ``threshold`` become ``IGNORE``."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = p.argmax(axis=-1).astype(np.int64)
    conf = p.max(axis=-1)
    if threshold > 0:
        labels = np.where(conf < threshold, IGNORE, labels)
    return PseudoLabelMap(labels, conf)


def ss_loss(probs: Tensor, pl: PseudoLabelMap) -> Tensor:
    return seg_loss(probs, pl.labels)


# -- class centres ---------------------------------------------------------

def downsample_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of ``(..., H, W)`` label maps to ``h x w``."""
    H, W = labels.shape[-2:]
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    return labels[..., rows[:, None], cols[None, :]]


def class_centers(feat: Tensor, labels: np.ndarray, num_classes: int):
    """Masked mean feature per class.

    ``feat`` is ``(..., h, w, D)`` and ``labels`` the matching ``(..., h, w)``
    map.  Returns ``(centers (K, D) tensor, valid (K,) bool)``; classes with
    no pixels get a zero row and ``valid = False``.
    """
    d = feat.shape[-1]
    flat = ops.reshape(feat, (-1, d))
    lab = np.asarray(labels).reshape(-1)
    if lab.size != flat.shape[0]:
        raise ValueError(f"labels {np.shape(labels)} do not match features {feat.shape}")
    onehot = (lab[None, :] == np.arange(num_classes)[:, None]).astype(feat.dtype)   # (K, M)
    counts = onehot.sum(axis=1)
    sums = ops.matmul(Tensor(onehot), flat)
    inv = (1.0 / np.maximum(counts, 1.0)).astype(feat.dtype)[:, None]
    return ops.mul(sums, inv), counts > 0


@dataclass
class ClassCenterBank:
    source_centers: np.ndarray
    target_centers: np.ndarray
    valid_source: np.ndarray
    valid_target: np.ndarray
    epoch: int = 1

    @classmethod
    def empty(cls, num_classes: int, dim: int, dtype=np.float32) -> "ClassCenterBank":
        z = np.zeros((num_classes, dim), dtype)
        f = np.zeros(num_classes, bool)
        return cls(z, z.copy(), f, f.copy(), 1)

    @property
    def num_classes(self) -> int:
        return self.source_centers.shape[0]


def mix_coefficients(e: int) -> tuple[float, float]:
    """``(1 - 1/e, 1/e)``: weights of the stored and the current centre."""
    if e < 1:
        raise ConfigError(f"epoch index must be >= 1, got {e}")
    return 1.0 - 1.0 / e, 1.0 / e


def mix_centers(stored: np.ndarray, valid_stored: np.ndarray, current, valid_current: np.ndarray,
                e: int):
    """Iterative mixing of one domain's centres; works on arrays or tensors.

    Classes valid now and before: ``(1 - 1/e) stored + (1/e) current``;
    valid only now: ``current``; absent now: ``stored`` unchanged.  The stored
    part is a constant, so gradients reach only the current centres.
    """
    keep, new = mix_coefficients(e)
    both = valid_current & valid_stored
    a = np.where(valid_current, np.where(both, new, 1.0), 0.0)[:, None]
    const = np.where(both[:, None], keep * stored, np.where(valid_current[:, None], 0.0, stored))
    if isinstance(current, Tensor):
        dt = current.dtype
        return ops.add(ops.mul(current, a.astype(dt)), Tensor(const.astype(dt)))
    return (a * current + const).astype(stored.dtype)


def bank_update(bank: ClassCenterBank, new_S, new_T, valid_S, valid_T, e: int) -> ClassCenterBank:
    """Return a new bank with both domains mixed in (see :func:`mix_centers`)."""
    new_S = new_S.data if isinstance(new_S, Tensor) else np.asarray(new_S)
    new_T = new_T.data if isinstance(new_T, Tensor) else np.asarray(new_T)
    return ClassCenterBank(
        mix_centers(bank.source_centers, bank.valid_source, new_S, valid_S, e),
        mix_centers(bank.target_centers, bank.valid_target, new_T, valid_T, e),
        bank.valid_source | valid_S,
        bank.valid_target | valid_T,
        e,
    )


def cfa_loss(source_centers, target_centers, valid: np.ndarray):
    """Mean over jointly valid classes of the channel-mean squared centre gap."""
    valid = np.asarray(valid, bool)
    num = int(valid.sum())
    if num == 0:
        if isinstance(source_centers, Tensor) or isinstance(target_centers, Tensor):
            dt = (source_centers if isinstance(source_centers, Tensor) else target_centers).dtype
            return Tensor(np.zeros((), dt))
        return 0.0
    if not isinstance(source_centers, Tensor) and not isinstance(target_centers, Tensor):
        diff = np.asarray(source_centers, float) - np.asarray(target_centers, float)
        return float((diff[valid] ** 2).mean(axis=1).sum() / num)
    diff = ops.sub(source_centers, target_centers)
    d = diff.shape[-1]
    w = (valid.astype(diff.dtype) / (num * d))[:, None]
    return ops.sum(ops.mul(ops.mul(diff, diff), w))


def bank_cfa_loss(bank: ClassCenterBank) -> float:
    return cfa_loss(bank.source_centers, bank.target_centers, bank.valid_source & bank.valid_target)


def center_distance(bank: ClassCenterBank) -> float:
    """``sum_i ||C_s,i - C_t,i||^2`` over classes valid in both domains."""
    valid = bank.valid_source & bank.valid_target
    diff = bank.source_centers[valid].astype(float) - bank.target_centers[valid].astype(float)
    return float((diff ** 2).sum())


# -- composite objective ---------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    seg: float
    ss: float = 0.0
    f: float = 0.0
    bank: ClassCenterBank | None = None


def _probs(model: DATR, images: np.ndarray):
    logits, feat = model(Tensor(images))
    probs = ops.softmax(upsample_logits(logits, images.shape[1], images.shape[2]), -1)
    return probs, feat


def total_loss(batch_s, batch_t, model: DATR, bank: ClassCenterBank | None,
               lambda_ss: float = 1.0, lambda_f: float = 0.1, phase: str = "adapt",
               e: int = 1, threshold: float = 0.0) -> LossParts:
    """``L_seg`` (source only) or ``L_seg + lambda_ss L_ss + lambda_f L_f`` (adapt).

    ``batch_s`` is ``(images, labels)``; ``batch_t`` is target images.  In
    the adapt phase the returned parts carry the updated centre bank.
    """
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    img_s, lab_s = batch_s
    probs_s, feat_s = _probs(model, img_s)
    l_seg = seg_loss(probs_s, lab_s)
    if phase == "source_only":
        return LossParts(l_seg, float(l_seg.data))

    k = model.cfg.num_classes
    img_t = batch_t[0] if isinstance(batch_t, tuple) else batch_t
    probs_t, feat_t = _probs(model, img_t)
    pl = make_pseudo_labels(probs_t, threshold)
    l_ss = ss_loss(probs_t, pl)

    h, w = feat_s.shape[1:3]
    cur_s, val_s = class_centers(feat_s, downsample_labels(lab_s, h, w), k)
    h, w = feat_t.shape[1:3]
    cur_t, val_t = class_centers(feat_t, downsample_labels(pl.labels, h, w), k)
    if bank is None:
        bank = ClassCenterBank.empty(k, feat_s.shape[-1], feat_s.dtype)
    mixed_s = mix_centers(bank.source_centers, bank.valid_source, cur_s, val_s, e)
    mixed_t = mix_centers(bank.target_centers, bank.valid_target, cur_t, val_t, e)
    l_f = cfa_loss(mixed_s, mixed_t, (bank.valid_source | val_s) & (bank.valid_target | val_t))

    total = ops.add(l_seg, ops.add(ops.scale(l_ss, lambda_ss), ops.scale(l_f, lambda_f)))
    new_bank = ClassCenterBank(mixed_s.data.copy(), mixed_t.data.copy(),
                               bank.valid_source | val_s, bank.valid_target | val_t, e)
    return LossParts(total, float(l_seg.data), float(l_ss.data), float(l_f.data), new_bank)


def poly_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


# -- training loop ---------------------------------------------------------

@dataclass
class Split:
    """In-memory image set: ``images (N, H, W, 3)`` in [0, 1], optional labels ``(N, H, W)``."""
    images: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class TrainConfig:
    epochs_source: int = 5
    epochs_adapt: int = 10
    batch_size: int = 8
    lr: float = 5e-5
    lambda_ss: float = 1.0
    lambda_f: float = 0.1
    threshold: float = 0.0
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    power: float = 0.9
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.epochs_source + self.epochs_adapt


LOG_COLUMNS = ("phase", "epoch", "lr", "loss_seg", "loss_ss", "loss_f", "center_dist", "miou_val")


@dataclass
class Trainer:
    """Stateful two-phase trainer; ``run()`` yields one log row per epoch.

    All randomness (batch order) comes from one seeded stream whose state is
    part of :meth:`state`, so a run resumed from a checkpoint replays the
    uninterrupted run exactly.
    """

    model: DATR
    source: Split
    target: Split
    cfg: TrainConfig
    val: Split | None = None
    epoch: int = 0
    step: int = 0
    bank: ClassCenterBank | None = None
    rng: Rng = field(init=False)
    optim: AdamW = field(init=False)

    def __post_init__(self):
        if len(self.source) == 0 or len(self.target) == 0:
            raise ConfigError("source and target datasets must be non-empty")
        if self.source.labels is None:
            raise ConfigError("source split needs labels")
        k = self.model.cfg.num_classes
        if self.source.labels.max() >= k and not np.all(
                (self.source.labels < k) | (self.source.labels == IGNORE)):
            raise ConfigError(f"labels exceed the model's {k} classes")
        self.rng = Rng(self.cfg.seed)
        self.optim = AdamW(self.model.named_parameters(), lr=self.cfg.lr, eps=self.cfg.adam_eps,
                           weight_decay=self.cfg.weight_decay)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.source) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.total_epochs * self.steps_per_epoch

    def phase_of(self, epoch: int) -> str:
        """Phase of the 1-based ``epoch``."""
        return "source_only" if epoch <= self.cfg.epochs_source else "adapt"

    def run_epoch(self) -> dict:
        epoch = self.epoch + 1
        phase = self.phase_of(epoch)
        e = epoch - self.cfg.epochs_source
        bs = self.cfg.batch_size
        order_s = self.rng.permutation(len(self.source))
        order_t = self.rng.permutation(len(self.target))
        sums = {"seg": 0.0, "ss": 0.0, "f": 0.0}
        dists = []
        lr = self.cfg.lr
        for b in range(self.steps_per_epoch):
            idx_s = order_s[b * bs:(b + 1) * bs]
            idx_t = order_t[np.arange(b * bs, b * bs + len(idx_s)) % len(self.target)]
            batch_s = (self.source.images[idx_s], self.source.labels[idx_s])
            lr = poly_lr(self.step, self.total_steps, self.cfg.lr, self.cfg.power)
            self.optim.lr = lr
            self.optim.zero_grad()
            parts = total_loss(batch_s, self.target.images[idx_t], self.model, self.bank,
                               self.cfg.lambda_ss, self.cfg.lambda_f, phase, max(e, 1),
                               self.cfg.threshold)
            parts.total.backward()
            self.optim.step()
            self.step += 1
            sums["seg"] += parts.seg
            sums["ss"] += parts.ss
            sums["f"] += parts.f
            if parts.bank is not None:
                self.bank = parts.bank
                dists.append(center_distance(self.bank))
        n = self.steps_per_epoch
        self.epoch = epoch
        adapt = phase == "adapt"
        return {
            "phase": phase,
            "epoch": epoch,
            "lr": lr,
            "loss_seg": sums["seg"] / n,
            "loss_ss": sums["ss"] / n if adapt else float("nan"),
            "loss_f": sums["f"] / n if adapt else float("nan"),
            "center_dist": float(np.mean(dists)) if dists else float("nan"),
            "miou_val": self.validate(),
        }

    def validate(self) -> float:
        if self.val is None or self.val.labels is None or len(self.val) == 0:
            return float("nan")
        return evaluate_miou(self.model, self.val, self.cfg.batch_size)

    def run(self):
        while self.epoch < self.cfg.total_epochs:
            yield self.run_epoch()

    # -- checkpoint state --------------------------------------------------
    def state(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "rng_state": self.rng.get_state(),
                "optim_t": self.optim.t}

    def load_state(self, state: dict, optim_arrays: dict, bank: ClassCenterBank | None) -> None:
        self.epoch = int(state["epoch"])
        self.step = int(state["step"])
        self.rng.set_state(int(state["rng_state"]))
        self.optim.load_state_arrays(optim_arrays, int(state["optim_t"]))
        self.bank = bank


def train(model: DATR, src: Split, tgt: Split, cfg: TrainConfig, val: Split | None = None):
    """Generator of ``(log_row, trainer)`` after every epoch."""
    trainer = Trainer(model, src, tgt, cfg, val)
    for row in trainer.run():
        yield row, trainer


def evaluate_miou(model: DATR, split: Split, batch_size: int = 8) -> float:
    preds = predict_split(model, split, batch_size)
    return mean_iou(preds, split.labels, model.cfg.num_classes)


def predict_split(model: DATR, split: Split, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(split), batch_size):
        _, labels = predict(split.images[i:i + batch_size], model)
        out.append(labels)
    return np.concatenate(out, axis=0)
