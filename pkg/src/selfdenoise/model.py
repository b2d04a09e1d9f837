"""Block-structured SDNN: noise before each block, a cosine head after it.

Training follows the usual recipe of SGD with momentum and a step learning
rate schedule. Evaluation runs noiselessly and averages the heads'
probabilities.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .heads import CosineHead, HeadOutput, average_predictions, head_forward
from .noise import NO_NOISE, NoiseSpec, Rng, apply_noise

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SDNN"
CHECKPOINT_VERSION = 1
EVAL_CHUNK = 256


class CheckpointError(ValueError):
    pass


@dataclass
class BlockSpec:
    """One block F_l: its conv layers, the noise applied to its input and whether a head follows."""

    convs: List[tuple]  # (kernel, out_channels, stride)
    noise: NoiseSpec = NO_NOISE
    has_head: bool = True

    @property
    def out_channels(self) -> int:
        return self.convs[-1][1]


@dataclass
class TrainConfig:
    epochs: int = 26
    lr: float = 0.1
    milestones: Sequence[int] = (20, 23)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0
    loss_weights: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: decayed once per milestone already passed."""
        passed = sum(1 for m in self.milestones if epoch > m)
        return self.lr * self.lr_decay ** passed


def default_blocks(channels=(16, 16, 32, 64), convs_per_block: int = 2, noise=None,
                   heads=None) -> List[BlockSpec]:
    """Conv blocks whose first conv has stride 2; ``channels[0]`` is the stem width."""
    n_blocks = len(channels) - 1
    noise = list(noise) if noise is not None else [NO_NOISE] * n_blocks
    heads = list(heads) if heads is not None else [True] * n_blocks
    if len(noise) != n_blocks or len(heads) != n_blocks:
        raise ValueError(f"need one noise spec and head flag per block ({n_blocks})")
    blocks = []
    for i in range(n_blocks):
        convs = [(3, channels[i + 1], 2)] + [(3, channels[i + 1], 1)] * (convs_per_block - 1)
        blocks.append(BlockSpec(convs, noise[i], bool(heads[i])))
    return blocks


class SdnnModel:
    """Stem conv followed by blocks, each optionally feeding a cosine head.

    ``blocks`` lists :class:`BlockSpec`; the last block always carries a head.
    """

    def __init__(self, in_channels: int, num_classes: int, blocks: Sequence[BlockSpec],
                 stem_channels: int = 16, embed_dim: int = 64, pool_target=(2, 2),
                 pool_mode: str = "max", gamma_init: float = 10.0, seed: int = 0, normalize: bool = True):
        if not blocks:
            raise ValueError("an SDNN needs at least one block")
        if not blocks[-1].has_head:
            raise ValueError("the last block must carry a head")
        if isinstance(pool_target, int):
            pool_target = (pool_target, pool_target)
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.blocks = list(blocks)
        self.stem_channels = stem_channels
        self.embed_dim = embed_dim
        self.pool_target = tuple(pool_target)
        self.pool_mode = pool_mode
        self.gamma_init = gamma_init
        self.seed = seed
        self.normalize = normalize

        rng = Rng(seed, (0,))
        self.stem = self._conv_params(rng.child(0), 3, in_channels, stem_channels)
        self.block_params = []
        c = stem_channels
        for l, block in enumerate(self.blocks):
            layers = []
            for j, (k, cout, _stride) in enumerate(block.convs):
                layers.append(self._conv_params(rng.child(1, l, j), k, c, cout))
                c = cout
            self.block_params.append(layers)
        self.heads: List[Optional[CosineHead]] = []
        for l, block in enumerate(self.blocks):
            if block.has_head:
                self.heads.append(CosineHead(block.out_channels, num_classes, embed_dim, rng.child(2, l),
                                             self.pool_target, pool_mode, gamma_init))
            else:
                self.heads.append(None)

    @staticmethod
    def _conv_params(rng: Rng, k: int, cin: int, cout: int):
        std = np.sqrt(2.0 / (k * k * cin))
        kernel = T.Tensor((std * rng.normal(k * k * cin * cout)).reshape(k, k, cin, cout), requires_grad=True)
        bias = T.Tensor(np.zeros(cout), requires_grad=True)
        return kernel, bias

    # ---------------------------------------------------------------- params

    def parameters(self) -> dict:
        """Name -> Tensor, in a fixed order (also the checkpoint order)."""
        params = {"stem.kernel": self.stem[0], "stem.bias": self.stem[1]}
        for l, layers in enumerate(self.block_params):
            for j, (k, b) in enumerate(layers):
                params[f"block{l}.conv{j}.kernel"] = k
                params[f"block{l}.conv{j}.bias"] = b
        for l, head in enumerate(self.heads):
            if head is not None:
                for name, p in head.parameters().items():
                    params[f"head{l}.{name}"] = p
        return params

    @property
    def active_heads(self) -> List[CosineHead]:
        return [h for h in self.heads if h is not None]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stem_channels": self.stem_channels,
            "embed_dim": self.embed_dim,
            "pool_target": list(self.pool_target),
            "pool_mode": self.pool_mode,
            "gamma_init": self.gamma_init,
            "seed": self.seed,
            "normalize": self.normalize,
            "blocks": [
                {
                    "convs": [list(c) for c in b.convs],
                    "noise": {"kind": b.noise.kind, "spatial": b.noise.spatial,
                              "sigma": b.noise.sigma, "p_drop": b.noise.p_drop},
                    "has_head": b.has_head,
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "SdnnModel":
        blocks = [BlockSpec([tuple(c) for c in b["convs"]], NoiseSpec(**b["noise"]), b["has_head"])
                  for b in cfg["blocks"]]
        return cls(cfg["in_channels"], cfg["num_classes"], blocks, cfg["stem_channels"], cfg["embed_dim"],
                   tuple(cfg["pool_target"]), cfg["pool_mode"], cfg["gamma_init"], cfg["seed"],
                   cfg.get("normalize", True))

    # --------------------------------------------------------------- forward

    def block_outputs(self, x: T.Tensor, rng: Optional[Rng] = None, training: bool = False) -> List[T.Tensor]:
        """Feature maps after every block; noise is drawn from ``rng.child(l)`` for block l."""
        x = T._as_tensor(x)
        if x.data.ndim != 4 or x.shape[3] != self.in_channels:
            raise T.ShapeError(f"expected N x H x W x {self.in_channels} images, got {x.shape}")
        k, b = self.stem
        h = T.relu(T.broadcast_add_channel(T.conv2d(x, k, 1, k.shape[0] // 2), b))
        if self.normalize:
            h = T.rms_normalize(h)
        outs = []
        for l, (block, layers) in enumerate(zip(self.blocks, self.block_params)):
            if training:
                if rng is None:
                    raise ValueError("training forward needs an rng")
                h = apply_noise(h, block.noise, rng.child(l), training=True)
            for (kernel, bias), (ksize, _cout, stride) in zip(layers, block.convs):
                h = T.relu(T.broadcast_add_channel(T.conv2d(h, kernel, stride, ksize // 2), bias))
            if self.normalize:
                h = T.rms_normalize(h)
            outs.append(h)
        return outs

    def head_outputs(self, x, rng: Optional[Rng] = None, training: bool = False,
                     class_weights: Optional[Sequence] = None) -> List[HeadOutput]:
        feats = self.block_outputs(x, rng, training)
        outs = []
        i = 0
        for f, head in zip(feats, self.heads):
            if head is None:
                continue
            w = None if class_weights is None else class_weights[i]
            outs.append(head_forward(head, f, w))
            i += 1
        return outs

    def embed(self, x: np.ndarray, chunk: int = EVAL_CHUNK) -> List[np.ndarray]:
        """Noiseless pre-normalisation embeddings, one N x D array per head."""
        x = np.asarray(x, dtype=T.DTYPE)
        parts: List[List[np.ndarray]] = [[] for _ in self.active_heads]
        for s in range(0, x.shape[0], chunk):
            feats = self.block_outputs(T.Tensor(x[s:s + chunk]))
            i = 0
            for f, head in zip(feats, self.heads):
                if head is not None:
                    parts[i].append(head.embed(f).data)
                    i += 1
        return [np.concatenate(p) for p in parts]


# ------------------------------------------------------------- pipeline ops


def forward_train(model: SdnnModel, x, rng: Rng) -> List[HeadOutput]:
    """Noisy training pass; heads see the uncorrupted output of their block."""
    return model.head_outputs(x, rng, training=True)


def forward_eval(model: SdnnModel, x, class_weights: Optional[Sequence] = None,
                 chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Noiseless pass returning the head-averaged N x C probabilities."""
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=T.DTYPE)
    rows = []
    for s in range(0, x.shape[0], chunk):
        outs = model.head_outputs(T.Tensor(x[s:s + chunk]), class_weights=class_weights)
        rows.append(average_predictions([o.probs for o in outs]))
    return np.concatenate(rows)


def train_loss(outputs: Sequence[HeadOutput], labels, weights: Optional[Sequence[float]] = None) -> T.Tensor:
    """Weighted sum of the heads' cross-entropy losses."""
    if weights is None:
        weights = [1.0] * len(outputs)
    if len(weights) != len(outputs):
        raise ValueError(f"{len(weights)} loss weights for {len(outputs)} heads")
    total = None
    for out, w in zip(outputs, weights):
        ce = T.softmax_cross_entropy(out.logits, labels)
        term = ce if w == 1.0 else T.scale(ce, T.Tensor([w]))
        total = term if total is None else T.add(total, term)
    return total


class SGD:
    """SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = T.DTYPE(momentum)
        self.weight_decay = T.DTYPE(weight_decay)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        lr = T.DTYPE(lr)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= lr * v


def fit(model: SdnnModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
        on_epoch: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Pretrain ``model`` on base-class images ``x`` (normalised N x H x W x C) and labels ``y``.

    Returns one log record per epoch with the learning rate, mean loss and
    per-head training accuracy.
    """
    x = np.asarray(x, dtype=T.DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot fit on an empty dataset")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} images but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    heads = model.active_heads
    root = Rng(cfg.seed, (1,))
    n = x.shape[0]
    log = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = root.child(0, epoch).permutation(n)
        loss_sum = 0.0
        correct = np.zeros(len(heads))
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            model.zero_grad()
            outs = forward_train(model, T.Tensor(xb), root.child(1, epoch, b))
            loss = train_loss(outs, yb, cfg.loss_weights)
            T.backward(loss)
            opt.step(lr)
            for head in heads:
                head.clamp_gamma()
            loss_sum += loss.item() * len(idx)
            for i, o in enumerate(outs):
                correct[i] += np.sum(np.argmax(o.logits.data, axis=1) == yb)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": loss_sum / n,
            "head_acc": [float(c / n) for c in correct],
        }
        if not np.isfinite(record["loss"]):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        logger.info("epoch %d lr %.4g loss %.4f acc %s", epoch, lr, record["loss"],
                    " ".join(f"{a:.3f}" for a in record["head_acc"]))
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    model.zero_grad()
    return log


# -------------------------------------------------------------- checkpoints


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def checkpoint_bytes(model: SdnnModel, extra: Optional[dict] = None) -> bytes:
    cfg = {"model": model.config()}
    if extra:
        cfg.update(extra)
    blob = canonical_json(cfg)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for name, p in model.parameters().items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: SdnnModel, path, extra: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def parse_checkpoint(data: bytes):
    """Return ``(model, config_blob)`` from checkpoint bytes."""
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, blob_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = json.loads(bytes(take(blob_len)).decode("utf-8"))
    model = SdnnModel.from_config(cfg["model"])
    params = model.parameters()
    seen = set()
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(shape)
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"parameter {name!r} has shape {shape}, expected {params[name].shape}")
        params[name].data = arr.astype(T.DTYPE)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    return model, cfg


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
