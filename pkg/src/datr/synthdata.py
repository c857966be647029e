"""Procedural pinhole / equirectangular dataset with exact labels.

The world is a camera at height 1 above a ground plane, looking at objects
placed on cylinders around it:

* buildings and poles are vertical slabs ``(longitude span, height span)``
  on a cylinder of radius ``depth``;
* vehicles are spherical caps, a fixed angular radius around a direction,
  so at latitude ``lat`` they cover ``1/cos(lat)`` times the longitude span
  they would at the equator.

Directions not covered by an object are sky above the horizon and ground
below.  Source images are pinhole renders and target images ERP renders
of independent scenes, each with its own colour style.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import ConfigError
from .erpgeo import erp_to_dir_grid, pinhole_to_dir_grid
from .numkit.rng import Rng

CLASS_NAMES = ("sky", "ground", "building", "pole", "vehicle")
SKY, GROUND, BUILDING, POLE, VEHICLE = range(5)
CAMERA_HEIGHT = 1.0

# per-class colour means (RGB in [0, 1]) and pixel noise of each domain
STYLES = {
    "source": {
        "colors": ((0.55, 0.72, 0.95), (0.42, 0.38, 0.33), (0.62, 0.60, 0.58),
                   (0.92, 0.80, 0.22), (0.82, 0.16, 0.14)),
        "noise": 0.03,
    },
    "target": {
        "colors": ((0.62, 0.74, 0.88), (0.40, 0.40, 0.38), (0.58, 0.56, 0.58),
                   (0.85, 0.78, 0.35), (0.75, 0.25, 0.25)),
        "noise": 0.06,
    },
}


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    cls: int
    kind: str               # "slab" or "cap"
    lon: float              # centre longitude
    half_width: float       # slab: half longitude span; cap: angular radius
    y0: float = 0.0         # slab height span (camera at 0, ground at -1)
    y1: float = 0.0
    lat: float = 0.0        # cap centre latitude
    depth: float = 1.0

    def covers(self, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
        if self.kind == "cap":
            cosang = (np.sin(lat) * math.sin(self.lat)
                      + np.cos(lat) * math.cos(self.lat) * np.cos(lon - self.lon))
            return cosang >= math.cos(self.half_width)
        dlon = np.abs((lon - self.lon + np.pi) % (2 * np.pi) - np.pi)
        y = self.depth * np.tan(lat)
        return (dlon <= self.half_width) & (y >= self.y0) & (y <= self.y1)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_classes: int
    objects: tuple = field(default_factory=tuple)   # front to back

    def classes_present(self) -> set:
        return {SKY, GROUND} | {o.cls for o in self.objects}


def _check_k(k: int) -> None:
    if not 2 <= k <= len(CLASS_NAMES):
        raise ConfigError(f"number of classes must be in [2, {len(CLASS_NAMES)}], got {k}")


def _draw_objects(rng: Rng, k: int) -> list:
    objs = []
    if k > BUILDING:
        for _ in range(int(rng.integers(3, 7))):
            objs.append(SceneObject(BUILDING, "slab", rng.uniform((), -np.pi, np.pi),
                                    rng.uniform((), 0.15, 0.45), -CAMERA_HEIGHT,
                                    rng.uniform((), 1.0, 6.0), depth=rng.uniform((), 6.0, 15.0)))
    if k > POLE:
        for _ in range(int(rng.integers(2, 6))):
            objs.append(SceneObject(POLE, "slab", rng.uniform((), -np.pi, np.pi),
                                    rng.uniform((), 0.025, 0.05), -CAMERA_HEIGHT,
                                    rng.uniform((), 1.5, 3.5), depth=rng.uniform((), 3.0, 8.0)))
    if k > VEHICLE:
        for _ in range(int(rng.integers(2, 5))):
            objs.append(SceneObject(VEHICLE, "cap", rng.uniform((), -np.pi, np.pi),
                                    rng.uniform((), 0.12, 0.25), lat=rng.uniform((), -0.45, -0.05),
                                    depth=rng.uniform((), 2.5, 6.0)))
    return objs


def sample_scene(rng: Rng, k: int = 5) -> SceneSpec:
    """Random layout; redrawn until every class of ``range(k)`` appears."""
    _check_k(k)
    seed = rng.get_state()
    while True:
        objs = _draw_objects(rng, k)
        if {o.cls for o in objs} | {SKY, GROUND} >= set(range(k)):
            break
    objs.sort(key=lambda o: (o.depth, o.cls, o.lon))
    return SceneSpec(seed, k, tuple(objs))


def cast(scene: SceneSpec, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Class of the frontmost surface along each direction."""
    labels = np.where(lat >= 0, SKY, GROUND).astype(np.uint8)
    for obj in reversed(scene.objects):          # paint back to front
        labels[obj.covers(lon, lat)] = obj.cls
    return labels


def _shade(labels: np.ndarray, lat: np.ndarray, style: str, rng: Rng) -> np.ndarray:
    st = STYLES[style]
    colors = np.asarray(st["colors"], np.float64)
    jitter = rng.uniform((len(colors), 3), -0.04, 0.04)
    img = (colors + jitter)[labels]
    # soft vertical gradient so sky and ground are not flat
    img = img * (0.9 + 0.1 * np.cos(lat))[..., None]
    img = img + rng.normal(img.shape, 0.0, st["noise"])
    return np.clip(img, 0.0, 1.0)


def render_pinhole(scene: SceneSpec, W_p: int, H_p: int, hfov: float, style: str = "source",
                   rng: Rng | None = None, yaw: float = 0.0):
    """Perspective render looking along longitude ``yaw``; returns ``(image, label)``."""
    v, u = np.mgrid[0:H_p, 0:W_p].astype(np.float64)
    lon, lat = pinhole_to_dir_grid(u, v, W_p, H_p, hfov)
    lon = lon + yaw
    labels = cast(scene, lon, lat)
    rng = rng if rng is not None else Rng(scene.seed)
    return _shade(labels, lat, style, rng), labels


def render_erp(scene: SceneSpec, W_e: int, H_e: int, style: str = "target", rng: Rng | None = None):
    if W_e != 2 * H_e:
        raise ConfigError(f"ERP width must be twice the height, got {W_e}x{H_e}")
    v, u = np.mgrid[0:H_e, 0:W_e].astype(np.float64)
    lon, lat = erp_to_dir_grid(u, v, W_e, H_e)
    labels = cast(scene, lon, lat)
    rng = rng if rng is not None else Rng(scene.seed)
    return _shade(labels, lat, style, rng), labels


@dataclass
class SamplePair:
    pinhole_image: np.ndarray
    pinhole_label: np.ndarray
    erp_image: np.ndarray
    erp_label: np.ndarray
    yaw: float = 0.0


def render_pair(scene: SceneSpec, pinhole_size=(128, 128), erp_size=(128, 256),
                hfov: float = math.pi / 2, yaw: float = 0.0) -> SamplePair:
    rng = Rng(scene.seed).spawn(1)
    pi, pl = render_pinhole(scene, pinhole_size[1], pinhole_size[0], hfov, "source", rng, yaw)
    ei, el = render_erp(scene, erp_size[1], erp_size[0], "target", rng)
    return SamplePair(pi, pl, ei, el, yaw)


# -- PPM / PGM -------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6; float images in [0, 1] are quantised to 8 bits."""
    arr = to_bytes(img) if img.dtype != np.uint8 else img
    h, w = arr.shape[:2]
    _write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_pgm(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise DataError(f"{path}: values outside 0..255")
    h, w = arr.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + arr.astype(np.uint8).tobytes())


def _write(path, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, found {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported")
    body = data[pos + 1:]
    if len(body) < w * h * channels:
        raise DataError(f"{path}: pixel data truncated")
    arr = np.frombuffer(body[:w * h * channels], np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    """``(H, W, 3)`` uint8."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# -- dataset ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    num_classes: int = 5
    pinhole_size: tuple = (128, 128)      # (H, W)
    erp_size: tuple = (128, 256)
    hfov_deg: float = 90.0
    n_train: int = 128
    n_val: int = 32


def _sample_rng(seed: int, split: str, domain: str, index: int) -> Rng:
    key = {"train": 1, "val": 2, "test": 3}.get(split, 9)
    return Rng(seed).spawn(key).spawn(1 if domain == "source" else 2).spawn(index)


def make_sample(cfg: DatasetConfig, split: str, domain: str, index: int):
    """One ``(image, label)`` of a domain; pure function of its arguments."""
    rng = _sample_rng(cfg.seed, split, domain, index)
    scene = sample_scene(rng.spawn(0), cfg.num_classes)
    style_rng = rng.spawn(1)
    if domain == "source":
        h, w = cfg.pinhole_size
        yaw = float(rng.spawn(2).uniform((), -np.pi, np.pi))
        return render_pinhole(scene, w, h, math.radians(cfg.hfov_deg), "source", style_rng, yaw)
    h, w = cfg.erp_size
    return render_erp(scene, w, h, "target", style_rng)


def write_dataset(pairs, out_dir, split: str, with_target_labels: bool) -> dict:
    """Write ``pairs = {'source': [(img, lab)...], 'target': [...]}`` under ``out_dir/split``."""
    root = Path(out_dir) / split
    counts = {}
    for domain, samples in pairs.items():
        for sub in ("images", "labels"):
            if sub == "labels" and domain == "target" and not with_target_labels:
                continue
            try:
                (root / domain / sub).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise DataError(f"cannot create {root / domain / sub}: {exc}") from exc
        stems = []
        for i, (img, lab) in enumerate(samples):
            stem = f"{i:04d}"
            write_ppm(root / domain / "images" / f"{stem}.ppm", img)
            if domain == "source" or with_target_labels:
                write_pgm(root / domain / "labels" / f"{stem}.pgm", lab)
            stems.append(stem)
        (root / domain / "index.txt").write_text("".join(s + "\n" for s in stems), encoding="utf-8")
        counts[domain] = len(stems)
    return {"split": split, "dir": str(root), "counts": counts}


def generate(cfg: DatasetConfig, out_dir) -> dict:
    """Generate train (target unlabeled) and val (both labeled) splits plus ``meta.json``."""
    _check_k(cfg.num_classes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for split, n, labeled in (("train", cfg.n_train, False), ("val", cfg.n_val, True)):
        pairs = {d: [make_sample(cfg, split, d, i) for i in range(n)] for d in ("source", "target")}
        manifest[split] = write_dataset(pairs, out, split, labeled)
    meta = {
        "classes": list(CLASS_NAMES[:cfg.num_classes]),
        "pinhole_size": list(cfg.pinhole_size),
        "erp_size": list(cfg.erp_size),
        "hfov_deg": cfg.hfov_deg,
        "seed": cfg.seed,
        "splits": {s: m["counts"] for s, m in manifest.items()},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def load_split(data_dir, split: str, domain: str, require_labels: bool = False):
    """Images as float32 ``(N, H, W, 3)`` in [0, 1] and labels ``(N, H, W)`` or ``None``."""
    root = Path(data_dir) / split / domain
    index = root / "index.txt"
    if not index.exists():
        raise DataError(f"missing {index}")
    stems = [s for s in index.read_text(encoding="utf-8").split() if s]
    if not stems:
        raise DataError(f"{index} lists no samples")
    images = np.stack([read_ppm(root / "images" / f"{s}.ppm") for s in stems]).astype(np.float32) / 255.0
    lab_dir = root / "labels"
    if lab_dir.is_dir():
        labels = np.stack([read_pgm(lab_dir / f"{s}.pgm") for s in stems]).astype(np.int64)
    elif require_labels:
        raise DataError(f"{root} has no labels")
    else:
        labels = None
    return images, labels


def read_meta(data_dir) -> dict:
    path = Path(data_dir) / "meta.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def in_memory_dataset(cfg: DatasetConfig):
    """Same samples as :func:`generate`, quantised to 8 bits like the files, without disk I/O."""
    out = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        for d in ("source", "target"):
            samples = [make_sample(cfg, split, d, i) for i in range(n)]
            imgs = np.stack([to_bytes(s[0]) for s in samples]).astype(np.float32) / 255.0
            labs = np.stack([s[1] for s in samples]).astype(np.int64)
            out[(split, d)] = (imgs, labs)
    return out


def class_histogram(labels: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(np.asarray(labels).reshape(-1), minlength=k)[:k] / np.asarray(labels).size

