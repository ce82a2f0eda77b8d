"""Training pairs, the optimisation loop over the conditional LK loss, and
checkpoint persistence.

Checkpoint layout (all integers little-endian)::

    b"DLK1"
    uint32 header length, then that many bytes of UTF-8 JSON
    float64 tensors in declaration order (shapes listed in the header)
    uint32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import Activation, ConvLayer, FeatureParams, Kind, SpecMismatchError
from .iclk import DEFAULT_DAMPING_REL
from .imaging import crop_resize, photometric_augment
from .loss import LossError, LossSample, conditional_lk_backward, conditional_lk_forward
from .warp import Box, Family, WarpParams, box_to_warp

log = logging.getLogger(__name__)

MAGIC = b"DLK1"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    b_translation: float = 0.06
    b_scale: float = 1.0 / 30.0
    truncation: float = 0.3
    samples_per_template: int = 2
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    damping: float | None = None
    rel_damping: float = DEFAULT_DAMPING_REL
    size: int = 64
    context: float = 2.0
    family: Family = Family.TRANSLATION_SCALE
    brightness_range: float = 0.05
    contrast_range: float = 0.1
    saturation_range: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.family = Family(self.family)
        if min(self.b_translation, self.b_scale, self.truncation) <= 0:
            raise ValueError("perturbation scales and truncation must be positive")
        if self.samples_per_template < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("samples_per_template and batch_size must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def laplace_from_uniform(u, b: float):
    """Inverse CDF of Laplace(0, b) for u in (-1/2, 1/2)."""
    u = np.asarray(u, dtype=float)
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_laplace(rng: np.random.Generator, b: float, size=None):
    if b <= 0:
        raise ValueError("Laplace scale must be positive")
    x = laplace_from_uniform(rng.uniform(-0.5, 0.5, size=size), b)
    return float(x) if size is None else x


def make_pair(frame_t: np.ndarray, frame_t1: np.ndarray, gt_box_t: Box, cfg: TrainConfig,
              rng: np.random.Generator, *, gt_box_t1: Box | None = None,
              perturbation: tuple[float, float, float] | None = None,
              sample_id: str = "") -> LossSample:
    """Template from ``frame_t`` at the box; source from ``frame_t1`` at a
    randomly perturbed box.

    ``dp_gt`` is the warp, in the source crop's normalized coordinates, that
    carries the perturbed crop onto the true box in ``frame_t1``
    (``gt_box_t1``, defaulting to ``gt_box_t``). ``perturbation`` forces
    (dx, dy, ds) instead of sampling.
    """
    target = gt_box_t if gt_box_t1 is None else gt_box_t1
    if perturbation is None:
        dx, dy = np.clip(sample_laplace(rng, cfg.b_translation, 2), -cfg.truncation, cfg.truncation)
        ds = float(np.clip(sample_laplace(rng, cfg.b_scale), -cfg.truncation, cfg.truncation))
    else:
        dx, dy, ds = perturbation
    if cfg.family is Family.TRANSLATION:
        ds = 0.0
    try:
        src_box = Box(gt_box_t.cx + dx * gt_box_t.w, gt_box_t.cy + dy * gt_box_t.h,
                      (1.0 + ds) * gt_box_t.w, (1.0 + ds) * gt_box_t.h)
    except ValueError as exc:
        raise ValueError(f"degenerate perturbed box: {exc}") from None
    dp_gt = box_to_warp(target, src_box, cfg.context, cfg.family)
    template = crop_resize(frame_t, gt_box_t, cfg.context, cfg.size)
    source = crop_resize(frame_t1, src_box, cfg.context, cfg.size)
    template = photometric_augment(template, rng, cfg.brightness_range, cfg.contrast_range,
                                   cfg.saturation_range)
    source = photometric_augment(source, rng, cfg.brightness_range, cfg.contrast_range,
                                 cfg.saturation_range)
    return LossSample(template, source, dp_gt, sample_id)


def sample_pairs(sequences, cfg: TrainConfig, rng: np.random.Generator) -> list[LossSample]:
    """One pass over every consecutive frame pair, shuffled."""
    index = [(si, t) for si, seq in enumerate(sequences) for t in range(len(seq) - 1)]
    if not index:
        raise TrainingError("training set has no frame pairs")
    samples = []
    for k in rng.permutation(len(index)):
        si, t = index[k]
        seq = sequences[si]
        f0, f1 = seq.frame(t), seq.frame(t + 1)
        for j in range(cfg.samples_per_template):
            samples.append(make_pair(f0, f1, seq.gt_boxes[t], cfg, rng,
                                     gt_box_t1=seq.gt_boxes[t + 1],
                                     sample_id=f"{seq.name}:{t}:{j}"))
    return samples


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: FeatureParams, grad: FeatureParams) -> FeatureParams:
        g = grad.tensors()
        if self.m is None:
            self.m = [np.zeros_like(x) for x in g]
            self.v = [np.zeros_like(x) for x in g]
        self.t += 1
        out = []
        for p, gi, m, v in zip(theta.tensors(), g, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * gi
            v *= self.beta2
            v += (1 - self.beta2) * gi * gi
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return theta.with_tensors(out)


def batch_loss_and_grad(theta: FeatureParams, samples, cfg: TrainConfig):
    """Mean loss and mean gradient, reduced in sample order."""
    total = 0.0
    acc = [np.zeros_like(t) for t in theta.tensors()]
    for s in samples:
        try:
            value, cache = conditional_lk_forward(theta, s, cfg.family, cfg.damping,
                                                  cfg.rel_damping)
        except LossError as exc:
            raise TrainingError(str(exc)) from exc
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss on sample {s.sample_id!r}")
        grad = conditional_lk_backward(theta, cache).grad_theta
        total += value
        for a, g in zip(acc, grad.tensors()):
            a += g
    n = len(samples)
    return total / n, theta.with_tensors([a / n for a in acc])


def mean_loss(theta: FeatureParams, samples, cfg: TrainConfig) -> float:
    return float(np.mean([
        conditional_lk_forward(theta, s, cfg.family, cfg.damping, cfg.rel_damping)[0]
        for s in samples]))


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)


def train(sequences, cfg: TrainConfig, theta_init: FeatureParams, *, samples=None,
          callback=None) -> tuple[FeatureParams, TrainHistory]:
    """Minibatch Adam on the mean conditional LK loss.

    Fresh training pairs are drawn from ``sequences`` every epoch unless a
    fixed list of ``samples`` is given. Deterministic for a fixed seed.
    """
    if samples is None and not sequences:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    theta = theta_init
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        if samples is None:
            epoch_samples = sample_pairs(sequences, cfg, rng)
        else:
            epoch_samples = [samples[i] for i in rng.permutation(len(samples))]
        losses = []
        for start in range(0, len(epoch_samples), cfg.batch_size):
            batch = epoch_samples[start:start + cfg.batch_size]
            value, grad = batch_loss_and_grad(theta, batch, cfg)
            losses.append(value)
            history.step_loss.append(value)
            if theta.num_params:
                theta = opt.step(theta, grad)
        history.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.6f", epoch + 1, history.epoch_loss[-1])
        if callback is not None:
            callback(epoch, theta, history)
    return theta, history


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    theta: FeatureParams
    config: dict = field(default_factory=dict)
    epoch: int = 0
    running_loss: float = float("nan")
    optimizer: str = "adam"


def _params_from_spec(spec: dict, tensors) -> FeatureParams:
    kind = Kind(spec["kind"])
    layers = []
    for i, ls in enumerate(spec["layers"]):
        k, cin, cout = ls["size"], ls["in"], ls["out"]
        layers.append(ConvLayer(tensors[2 * i].reshape(k, k, cin, cout),
                                tensors[2 * i + 1].reshape(cout), Activation(ls["activation"])))
    return FeatureParams(kind, layers, bool(spec.get("mean_subtract", False)))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = ckpt.theta.tensors()
    header = {
        "format_version": FORMAT_VERSION,
        "spec": ckpt.theta.spec(),
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "running_loss": None if not np.isfinite(ckpt.running_loss) else ckpt.running_loss,
        "optimizer": ckpt.optimizer,
        "shapes": [list(t.shape) for t in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path, expected_spec: dict | None = None) -> Checkpoint:
    """Read a checkpoint, validating magic, CRC, version and (optionally) the
    extractor layout."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    (hlen,) = struct.unpack("<I", body[4:8])
    try:
        header = json.loads(body[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('format_version')}")
    if expected_spec is not None and header["spec"] != expected_spec:
        raise SpecMismatchError(
            f"{path}: checkpoint extractor {header['spec']} does not match {expected_spec}")
    data = body[8 + hlen:]
    tensors, offset = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated tensor data")
        tensors.append(np.frombuffer(data[offset:offset + n], dtype="<f8").reshape(shape).copy())
        offset += n
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    loss = header.get("running_loss")
    return Checkpoint(_params_from_spec(header["spec"], tensors), header.get("config", {}),
                      int(header.get("epoch", 0)), float("nan") if loss is None else float(loss),
                      header.get("optimizer", "adam"))
