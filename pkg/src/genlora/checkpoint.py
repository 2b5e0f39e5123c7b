"""Single-file named-tensor container for models and datasets.

Layout (all integers little-endian)::

    b"LEGO"  u32 version (=1)
    u32 registry count, then per name: u16 byte length + UTF-8 bytes
    u32 tensor count, then per tensor:
        u16 name length + UTF-8 name, u8 rank, rank x u64 extents,
        float32 little-endian data

Tensors are written sorted by name, so a load/save round trip reproduces
the file byte for byte.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneWeights, backbone_tensor_shapes
from .config import RunConfig, parse_config
from .data import Dataset, Sample
from .errors import ConfigError, CorruptionError, DataError, FormatError
from .head import AttentionPool, Classifier, DetectionHead
from .lora import LoraBranch, LoraHub
from .model import Detector
from .router import RouterMLP

MAGIC = b"LEGO"
VERSION = 1


# ---------------------------------------------------------------- raw container


def encode_container(registry, tensors):
    """Bytes for a registry (list of names) and a {name: array} mapping."""
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(registry))]
    for name in registry:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise FormatError(f"tensor {name} has too many dimensions")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CorruptionError(f"truncated file: {what} needs {n} bytes", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what):
        (n,) = self.unpack("<H", f"{what} length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"{what} is not valid UTF-8", start) from None


def decode_container(data):
    """Inverse of ``encode_container``: returns (registry, {name: float32 array})."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint container (bad magic bytes)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}; this reader handles {VERSION}")
    (count,) = r.unpack("<I", "registry count")
    registry = [r.name("registry name") for _ in range(count)]
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        at = r.pos
        name = r.name("tensor name")
        if name in tensors:
            raise CorruptionError(f"duplicate tensor name {name!r}", at)
        (rank,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{rank}Q", "tensor extents") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CorruptionError(f"{len(data) - r.pos} trailing bytes after the last tensor", r.pos)
    return registry, tensors


def _write(path, payload):
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_bytes()


# ---------------------------------------------------------------- models


def config_hash(text):
    """First 24 bits of the SHA-256 of the config text; exact as a float32."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:3], "big")


def model_config(model: Detector) -> RunConfig:
    """The run config attached to a model, or one derived from its shapes."""
    cfg = model.extra.get("config")
    if cfg is not None:
        return cfg
    vit = model.backbone.config
    kw = dict(image_size=vit.image_size, patch_size=vit.patch_size, channels=vit.channels,
              embed_dim=vit.embed_dim, depth=vit.depth, heads=vit.heads, mlp_ratio=vit.mlp_ratio,
              lora_targets=vit.lora_targets, warmup_epochs=vit.warmup_epochs,
              route_per_layer=model.route_per_layer, k=max(model.k, 1))
    if model.hub.branches:
        kw.update(rank=model.hub.branches[0].rank, alpha=model.hub.branches[0].alpha)
    if model.router is not None:
        kw["router_hidden"] = model.router.w1.shape[1]
    if model.head is not None:
        kw["head"] = model.head.mode
    return RunConfig(**kw)


def _check_matches(cfg: RunConfig, model: Detector):
    if cfg.vit() != model.backbone.config:
        raise ConfigError("config backbone settings do not match the model")
    for b in model.hub.branches:
        if (b.rank, b.alpha) != (cfg.rank, cfg.alpha):
            raise ConfigError(f"branch {b.name!r} has rank/alpha ({b.rank}, {b.alpha}); "
                              f"config says ({cfg.rank}, {cfg.alpha})")


def checkpoint_bytes(model: Detector, config: RunConfig | None = None):
    cfg = config if config is not None else model_config(model)
    _check_matches(cfg, model)
    text = cfg.to_text()
    tensors = dict(model.named())
    tensors["meta.config"] = np.frombuffer(text.encode(), dtype=np.uint8).astype(np.float32)
    tensors["meta.config_hash"] = np.array([config_hash(text)], dtype=np.float32)
    return encode_container(model.names, tensors)


def save_checkpoint(model: Detector, path, config: RunConfig | None = None):
    _write(path, checkpoint_bytes(model, config))


def model_from_container(registry, tensors, source="<checkpoint>"):
    if "meta.config" not in tensors:
        raise FormatError(f"{source}: missing meta.config")
    raw = tensors["meta.config"]
    if raw.ndim != 1 or np.any(raw != np.round(raw)) or np.any((raw < 0) | (raw > 255)):
        raise FormatError(f"{source}: meta.config is not a byte string")
    text = raw.astype(np.uint8).tobytes().decode("utf-8")
    stored = tensors.get("meta.config_hash")
    if stored is None or stored.shape != (1,) or int(stored[0]) != config_hash(text):
        raise FormatError(f"{source}: meta.config_hash does not match meta.config")
    cfg = parse_config(text, f"{source}:meta.config")
    vit = cfg.vit()

    bb = {}
    for name, shape in backbone_tensor_shapes(vit).items():
        t = tensors.get(f"backbone.{name}")
        if t is None or t.shape != tuple(shape):
            raise ConfigError(f"{source}: backbone tensor {name} missing or mis-shaped")
        bb[name] = t
    backbone = BackboneWeights(vit, bb)

    branches = []
    for gname in registry:
        factors = {}
        for slot in vit.slots:
            layer, proj = slot
            a = tensors.get(f"lora.{gname}.{layer}.{proj}.A")
            b = tensors.get(f"lora.{gname}.{layer}.{proj}.B")
            if a is None or b is None:
                raise ConfigError(f"{source}: branch {gname!r} lacks factors for slot {slot}")
            if a.shape != (vit.embed_dim, cfg.rank) or b.shape != (cfg.rank, vit.embed_dim):
                raise ConfigError(f"{source}: branch {gname!r} factors mis-shaped for rank {cfg.rank}")
            factors[slot] = (a, b)
        branches.append(LoraBranch(gname, cfg.rank, cfg.alpha, factors, trainable=False))
    lora_names = {n for n in tensors if n.startswith("lora.")}
    known = {n for b in branches for n, _ in b.named()}
    if lora_names - known:
        raise ConfigError(f"{source}: LoRA tensors for generators outside the registry")
    hub = LoraHub(vit.slots, branches)

    router = None
    if any(n.startswith("router.") for n in tensors):
        try:
            router = RouterMLP(tensors["router.l1.w"], tensors["router.l1.b"],
                               tensors["router.l2.w"], tensors["router.l2.b"])
        except KeyError as exc:
            raise ConfigError(f"{source}: incomplete router ({exc.args[0]} missing)") from None
        if router.width != len(registry):
            raise ConfigError(f"{source}: router width {router.width} but registry lists "
                              f"{len(registry)} generators")
    head = None
    if any(n.startswith("head.") for n in tensors):
        d = vit.embed_dim
        if cfg.head == "attn_pool":
            attn = AttentionPool(tensors["head.attn.q"], tensors["head.attn.wk"], tensors["head.attn.wv"])
        else:
            attn = AttentionPool(np.zeros(d, np.float32), np.zeros((d, d), np.float32),
                                 np.zeros((d, d), np.float32))
        head = DetectionHead(attn, Classifier(tensors["head.clf.w"], tensors["head.clf.b"]), cfg.head)
    model = Detector(backbone, hub, head, router, cfg.route_per_layer)
    model.extra["config"] = cfg
    return model


def load_checkpoint(path) -> Detector:
    data = _read(path)
    try:
        registry, tensors = decode_container(data)
    except CorruptionError as exc:
        raise CorruptionError(f"{path}: {exc}", exc.offset) from None
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return model_from_container(registry, tensors, str(path))


# ---------------------------------------------------------------- datasets


def _meta_text(dataset: Dataset, info: dict):
    lines = [f"k = {len(dataset.names)}", f"generators = {','.join(dataset.names)}"]
    lines += [f"{k} = {v}" for k, v in info.items()]
    return "\n".join(lines) + "\n"


def split_container(samples, names):
    tensors = {f"img.{i}": s.image for i, s in enumerate(samples)}
    tensors["labels"] = np.array([s.y for s in samples], dtype=np.float32)
    tensors["gens"] = np.array([s.g for s in samples], dtype=np.float32)
    return encode_container(names, tensors)


def save_dataset(dataset: Dataset, directory, info=None):
    """Write ``meta`` plus ``train.bin`` / ``test.bin`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta").write_text(_meta_text(dataset, info or {}))
    for split in ("train", "test"):
        _write(d / f"{split}.bin", split_container(getattr(dataset, split), dataset.names))


def read_meta(directory):
    path = Path(directory) / "meta"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset meta file at {path}")
    meta = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_split(path, names=None):
    data = _read(path)
    try:
        registry, tensors = decode_container(data)
    except CorruptionError as exc:
        raise CorruptionError(f"{path}: {exc}", exc.offset) from None
    if names is not None and registry != list(names):
        raise DataError(f"{path}: generator registry {registry} disagrees with meta {list(names)}")
    labels = tensors.get("labels")
    gens = tensors.get("gens")
    if labels is None or gens is None or labels.shape != gens.shape:
        raise DataError(f"{path}: missing or inconsistent labels/gens tensors")
    samples = []
    for i in range(labels.shape[0]):
        img = tensors.get(f"img.{i}")
        if img is None:
            raise DataError(f"{path}: missing img.{i}")
        samples.append(Sample(img, int(labels[i]), int(gens[i])))
    if int(gens.max(initial=0)) > len(registry):
        raise DataError(f"{path}: generator id beyond the registry")
    return registry, samples


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = read_meta(d)
    names = [n for n in meta.get("generators", "").split(",") if n]
    _, train = load_split(d / "train.bin", names)
    _, test = load_split(d / "test.bin", names)
    return Dataset(names, train, test)
