"""Adversarial training loop, ensemble cascade, checkpoints and run logs."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .adversary import DiscriminatorConfig, PatchDiscriminator, d_loss, g_adv_loss, mr_l1_loss
from .diffcore import Adam, DiffArray, backward, no_grad
from .phantom import hu_normalize, load_manifest
from .stitcher import PatchGrid, apply_mask, extract_patches, synthesize_volume
from .swinseer import GeneratorConfig, build_generator
from .texture import FeatureStack, TextureLoss
from .volio import read_volume


@dataclass
class TrainConfig:
    lambda1: float = 100.0
    lambda2: float = 100.0
    lr_g: float = 2e-4
    lr_d: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 1500
    seed: int = 0
    patch: int = 16
    overlap: int = 4
    cascade: int = 2
    log_wall_time: bool = False

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.overlap < self.patch:
            raise ValueError(f"overlap {self.overlap} must satisfy 0 <= o < {self.patch}")
        if self.batch_size < 1 or self.steps < 0 or self.cascade < 1:
            raise ValueError("batch size and cascade length must be >= 1, steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class PairedVolumes:
    """Normalized, masked volumes of one split; HU truth kept for evaluation."""

    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    truth: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def prepare_pair(tlc_hu, rv_hu, mask) -> tuple[np.ndarray, np.ndarray]:
    return apply_mask(hu_normalize(tlc_hu), mask), apply_mask(hu_normalize(rv_hu), mask)


def load_split(manifest, split: str) -> PairedVolumes:
    _, pairs = load_manifest(manifest)
    ids, xs, ys, ms, truths = [], [], [], [], []
    for rec in pairs:
        if rec.split != split:
            continue
        mask = read_volume(rec.mask, expect_dtype=1).data
        x, y = prepare_pair(read_volume(rec.tlc, 0).data, read_volume(rec.rv, 0).data, mask)
        ids.append(f"pair{rec.index:03d}")
        xs.append(x)
        ys.append(y)
        ms.append(mask)
        truths.append(rec.truth)
    if not ids:
        raise ValueError(f"{manifest}: no pairs in split {split!r}")
    return PairedVolumes(ids, np.stack(xs), np.stack(ys), np.stack(ms), truths)


class PatchSampler:
    """Seeded uniform patch origins over every patch that overlaps the mask's bounding box.

    Origins run from ``lo - p + 1`` to ``hi`` per axis, clamped to the volume,
    so the sampled positions include every origin of the inference grid.
    """

    def __init__(self, masks: np.ndarray, p: int, seed: int):
        self.p = p
        self.rng = np.random.default_rng(seed)
        self.n = len(masks)
        self.ranges = []
        for m in masks:
            idx = np.argwhere(m)
            lo_b, hi_b = idx.min(axis=0), idx.max(axis=0)
            rng = []
            for e, a, b in zip(m.shape, lo_b, hi_b):
                if p > e:
                    raise ValueError(f"patch edge {p} exceeds volume extent {e}")
                lo = int(max(a - p + 1, 0))
                hi = int(min(b, e - p))
                rng.append((lo, hi))
            self.ranges.append(rng)

    def sample(self, batch: int) -> list[tuple[int, tuple[int, int, int]]]:
        out = []
        for _ in range(batch):
            v = int(self.rng.integers(self.n))
            origin = tuple(int(self.rng.integers(lo, hi + 1)) for lo, hi in self.ranges[v])
            out.append((v, origin))
        return out


def gather(volumes: np.ndarray, picks, p: int) -> np.ndarray:
    """Stack (N, C, p, p, p) patches from (n, [C,] X, Y, Z) volumes."""
    out = []
    for v, (a, b, c) in picks:
        out.append(volumes[v][..., a : a + p, b : b + p, c : c + p])
    arr = np.stack(out)
    return arr[:, None] if arr.ndim == 4 else arr


# ---------------------------------------------------------------------------
# training state


class Stage:
    """One cascade member: generator, discriminator, their optimizers, the texture loss."""

    def __init__(self, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, train_cfg: TrainConfig,
                 texture_stack: FeatureStack, index: int = 1):
        gen_cfg.validate()
        disc_cfg.validate()
        train_cfg.validate()
        self.index = index
        self.gen_cfg = gen_cfg
        self.disc_cfg = disc_cfg
        self.train_cfg = train_cfg
        self.G = build_generator(gen_cfg)
        self.D = PatchDiscriminator(disc_cfg)
        self.texture = TextureLoss(texture_stack)
        t = train_cfg
        self.opt_g = Adam(self.G.parameters(), t.lr_g, t.beta1, t.beta2, t.eps)
        self.opt_d = Adam(self.D.parameters(), t.lr_d, t.beta1, t.beta2, t.eps)
        self.step = 0


def _check_finite(**terms: float) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite {name} ({value})")


def g_total_loss(x, y, mask, G, D, texture, lambda1: float = 100.0, lambda2: float = 100.0, outputs=None):
    """L_ADV + lambda1 * L_MR + lambda2 * L_DISTS_MV; returns (total, terms)."""
    x, y = DiffArray(x) if not isinstance(x, DiffArray) else x, DiffArray(y) if not isinstance(y, DiffArray) else y
    outputs = G(x) if outputs is None else outputs
    y_hat = outputs[2]
    l_adv = g_adv_loss(D(x[:, :1], y_hat))
    l_mr = mr_l1_loss(y, outputs, mask)
    l_tex = texture(y, y_hat)
    total = l_adv + l_mr * float(lambda1) + l_tex * float(lambda2)
    return total, {"l_adv": l_adv, "l_mr": l_mr, "l_dists_mv": l_tex}


def train_step(stage: Stage, x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> dict:
    """One discriminator update on detached fakes, then one generator update."""
    if len(x) == 0:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    cfg = stage.train_cfg
    xa, ya = DiffArray(x), DiffArray(y)
    outputs = stage.G(xa)
    cond = xa[:, :1]

    stage.opt_d.zero_grad()
    l_d = d_loss(stage.D(cond, ya), stage.D(cond, outputs[2].detach()))
    _check_finite(l_d=l_d.item())
    backward(l_d)
    stage.opt_d.step()

    stage.opt_g.zero_grad()
    total, terms = g_total_loss(xa, ya, mask, stage.G, stage.D, stage.texture, cfg.lambda1, cfg.lambda2, outputs)
    _check_finite(**{k: v.item() for k, v in terms.items()}, l_total=total.item())
    backward(total)
    stage.D.zero_grad()
    stage.opt_g.step()

    stage.step += 1
    rec = {
        "stage": stage.index,
        "step": stage.step,
        "l_adv": terms["l_adv"].item(),
        "l_mr": terms["l_mr"].item(),
        "l_dists_mv": terms["l_dists_mv"].item(),
        "l_d": l_d.item(),
        "wall_time": round(time.perf_counter() - t0, 6) if cfg.log_wall_time else None,
    }
    return rec


# ---------------------------------------------------------------------------
# cascade


def cascade_inputs(x_volume: np.ndarray, previous: np.ndarray | None) -> np.ndarray:
    return x_volume[None] if previous is None else np.stack([x_volume, previous])


def cascade_infer(generators, x_volume: np.ndarray, mask: np.ndarray, p: int, o: int,
                  return_all: bool = False, batch_size: int = 8):
    """Chain stitched predictions: stage k sees (x, stage k-1 output)."""
    generators = list(generators)
    if not generators:
        raise ValueError("cascade needs at least one generator")
    outs = []
    prev = None
    for k, G in enumerate(generators):
        expected = 1 if k == 0 else 2
        if G.config.in_channels != expected:
            raise ValueError(f"cascade stage {k + 1} expects {expected} input channels, checkpoint has {G.config.in_channels}")
        prev = synthesize_volume(G, cascade_inputs(x_volume, prev), mask, p, o, batch_size)
        outs.append(prev)
    return outs if return_all else outs[-1]


def stage_seed(base_seed: int, stage: int, offset: int) -> int:
    return int(base_seed) + 1000 * int(stage) + int(offset)


def cascade_train(train_cfg: TrainConfig, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                  texture_stack: FeatureStack, data: PairedVolumes,
                  on_record: Callable[[dict], None] | None = None,
                  on_stage: Callable[[Stage], None] | None = None) -> list[Stage]:
    """Train ``train_cfg.cascade`` generators in sequence; earlier stages are frozen."""
    train_cfg.validate()
    stages: list[Stage] = []
    prev_pred = None
    p = train_cfg.patch
    for k in range(1, train_cfg.cascade + 1):
        g_cfg = GeneratorConfig(**{**gen_cfg.to_dict(), "in_channels": 1 if k == 1 else 2,
                                   "seed": stage_seed(gen_cfg.seed, k, 0)})
        d_cfg = DiscriminatorConfig(**{**disc_cfg.to_dict(), "seed": stage_seed(disc_cfg.seed, k, 1)})
        stage = Stage(g_cfg, d_cfg, train_cfg, texture_stack, index=k)
        inputs = data.x if prev_pred is None else np.stack([data.x, prev_pred], axis=1)
        sampler = PatchSampler(data.mask, p, stage_seed(train_cfg.seed, k, 2))
        for _ in range(train_cfg.steps):
            picks = sampler.sample(train_cfg.batch_size)
            rec = train_step(stage, gather(inputs, picks, p), gather(data.y, picks, p), gather(data.mask, picks, p))
            if on_record is not None:
                on_record(rec)
        stage.G.freeze()
        stages.append(stage)
        if on_stage is not None:
            on_stage(stage)
        if k < train_cfg.cascade:
            gens = [s.G for s in stages]
            prev_pred = np.stack([
                cascade_infer(gens, data.x[i], data.mask[i], p, train_cfg.overlap) for i in range(len(data))
            ])
    return stages


def heldout_mr_loss(generators, data: PairedVolumes, p: int, o: int, batch_size: int = 8) -> float:
    """Mean L_MR of the last generator over the stitching grid of every volume."""
    generators = list(generators)
    total, count = 0.0, 0
    with no_grad():
        for i in range(len(data)):
            prev = None
            if len(generators) > 1:
                prev = cascade_infer(generators[:-1], data.x[i], data.mask[i], p, o, batch_size=batch_size)
            inputs = apply_mask(cascade_inputs(data.x[i], prev), data.mask[i])
            _, xp = extract_patches(inputs, p, o)
            _, yp = extract_patches(data.y[i], p, o)
            _, mp = extract_patches(data.mask[i], p, o)
            for s in range(0, len(xp), batch_size):
                outs = generators[-1](DiffArray(xp[s : s + batch_size]))
                n = len(xp[s : s + batch_size])
                total += mr_l1_loss(DiffArray(yp[s : s + batch_size, None]), outs, mp[s : s + batch_size, None]).item() * n
                count += n
    return total / count


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"LVCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sH32sQ")


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]


def stage_checkpoint(stage: Stage) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for prefix, module, opt in (("G", stage.G, stage.opt_g), ("D", stage.D, stage.opt_d)):
        names = [n for n, _ in module.named_parameters()]
        for n, p in module.named_parameters():
            tensors[f"{prefix}.{n}"] = p.data
        for n, m, v in zip(names, opt.state.m, opt.state.v):
            tensors[f"adam_{prefix}.m.{n}"] = m
            tensors[f"adam_{prefix}.v.{n}"] = v
    meta = {
        "format": CKPT_VERSION,
        "stage": stage.index,
        "step": stage.step,
        "generator": stage.gen_cfg.to_dict(),
        "discriminator": stage.disc_cfg.to_dict(),
        "train": stage.train_cfg.to_dict(),
        "texture": stage.texture.stack.describe(),
        "adam_G": {"t": stage.opt_g.state.t, "lr": stage.opt_g.state.lr},
        "adam_D": {"t": stage.opt_d.state.t, "lr": stage.opt_d.state.lr},
    }
    return Checkpoint(meta, tensors)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, hashlib.sha256(body).digest(), len(body)) + body


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < _CKPT_HEAD.size:
        raise CheckpointError(f"{source}: truncated header")
    magic, version, digest, length = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    body = buf[_CKPT_HEAD.size :]
    if len(body) != length:
        raise CheckpointError(f"{source}: truncated or padded body ({len(body)} of {length} bytes)")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch")
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"{source}: malformed parameter table")
        out = body[pos : pos + n]
        pos += n
        return out

    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(body):
        raise CheckpointError(f"{source}: trailing bytes in parameter table")
    return Checkpoint(meta, tensors)


def checkpoint_save(state, path) -> None:
    ckpt = stage_checkpoint(state) if isinstance(state, Stage) else state
    Path(path).write_bytes(encode_checkpoint(ckpt))


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def _sub(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def restore_generator(ckpt: Checkpoint, expect: GeneratorConfig | None = None):
    cfg = GeneratorConfig(**ckpt.meta["generator"])
    if expect is not None:
        want, have = expect.to_dict(), cfg.to_dict()
        diff = sorted(k for k in want if k != "seed" and want[k] != have.get(k))
        if diff:
            detail = ", ".join(f"{k}: checkpoint {have.get(k)!r} vs config {want[k]!r}" for k in diff)
            raise CheckpointMismatch(f"generator config mismatch ({detail})")
    G = build_generator(cfg)
    G.load_state_dict(_sub(ckpt.tensors, "G."))
    G.freeze()
    return G


def restore_stage(ckpt: Checkpoint) -> Stage:
    m = ckpt.meta
    stage = Stage(GeneratorConfig(**m["generator"]), DiscriminatorConfig(**m["discriminator"]),
                  TrainConfig(**m["train"]), FeatureStack(**m["texture"]), m["stage"])
    stage.G.load_state_dict(_sub(ckpt.tensors, "G."))
    stage.D.load_state_dict(_sub(ckpt.tensors, "D."))
    for prefix, module, opt in (("G", stage.G, stage.opt_g), ("D", stage.D, stage.opt_d)):
        names = [n for n, _ in module.named_parameters()]
        opt.state.m = [ckpt.tensors[f"adam_{prefix}.m.{n}"].copy() for n in names]
        opt.state.v = [ckpt.tensors[f"adam_{prefix}.v.{n}"].copy() for n in names]
        opt.state.t = m[f"adam_{prefix}"]["t"]
    stage.step = m["step"]
    return stage


def write_log(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
