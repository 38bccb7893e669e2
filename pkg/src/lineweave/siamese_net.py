"""Two-branch patch-similarity network with shared weights.

One convolutional branch embeds a patch into 512 dimensions; the pair
classifier concatenates both embeddings and feeds fully connected layers
into a sigmoid. Training uses Adam at the baseline hyperparameters with
early stopping on validation accuracy.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

EMBED_DIM = 512
CHECKPOINT_MAGIC = b"LWEAVCKP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ConvStage:
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0
    pool: tuple[int, int] | None = None  # (size, stride)


def default_stages() -> tuple[ConvStage, ...]:
    """AlexNet-lineage branch ending in 512 channels."""
    return (
        ConvStage(96, 11, stride=4, pool=(3, 2)),
        ConvStage(256, 5, padding=2, pool=(3, 2)),
        ConvStage(384, 3, padding=1),
        ConvStage(384, 3, padding=1),
        ConvStage(512, 3, padding=1),
    )


@dataclass(frozen=True)
class ArchConfig:
    """Branch and head layout.

    The final conv stage must emit 512 channels (the embedding width). The
    head consumes both branch embeddings concatenated (1024 wide) and must
    end in a single logit. head_pool is the extra max pool applied after
    the last conv stage on the pair-classifier path only.
    """

    input_side: int = 350
    stages: tuple[ConvStage, ...] = field(default_factory=default_stages)
    head_widths: tuple[int, ...] = (512, 256, 64, 16, 1)
    head_pool: tuple[int, int] | None = (3, 2)

    def validate(self) -> None:
        if self.input_side < 1:
            raise ValueError("input_side must be positive")
        if not self.stages:
            raise ValueError("need at least one conv stage")
        if self.stages[-1].filters != EMBED_DIM:
            raise ValueError(f"last conv stage must have {EMBED_DIM} filters")
        if not self.head_widths or self.head_widths[-1] != 1:
            raise ValueError("head must end in width 1")
        self.shape_trace()

    def shape_trace(self) -> list[tuple[str, int]]:
        """Per-stage spatial sides, raising with the offending layer name.

        Convolutions floor; pooling rounds up (ceil mode), matching the
        Caffe-era AlexNet convention.
        """
        side = self.input_side
        trace = []
        for i, st in enumerate(self.stages, start=1):
            side = (side + 2 * st.padding - st.kernel) // st.stride + 1
            if side < 1:
                raise ValueError(f"conv{i} collapses the spatial side to {side}")
            trace.append((f"conv{i}", side))
            if st.pool is not None:
                size, stride = st.pool
                side = -(-(side - size) // stride) + 1
                if side < 1:
                    raise ValueError(f"pool{i} collapses the spatial side to {side}")
                trace.append((f"pool{i}", side))
        if self.head_pool is not None:
            size, stride = self.head_pool
            hside = -(-(side - size) // stride) + 1
            if hside < 1:
                raise ValueError(f"head pool collapses the spatial side to {hside}")
            trace.append(("head_pool", hside))
        return trace

    def conv_map_side(self) -> int:
        """Spatial side of the last conv activation (pre head pool)."""
        side = self.input_side
        for st in self.stages:
            side = (side + 2 * st.padding - st.kernel) // st.stride + 1
            if st.pool is not None:
                size, stride = st.pool
                side = -(-(side - size) // stride) + 1
        return side

    def head_map_side(self) -> int:
        """Spatial side feeding the pair head (after the head-only pool)."""
        side = self.conv_map_side()
        if self.head_pool is not None:
            size, stride = self.head_pool
            side = -(-(side - size) // stride) + 1
        return side

    def total_conv_stride(self) -> int:
        """Input pixels per conv-map cell (product of all strides)."""
        stride = 1
        for st in self.stages:
            stride *= st.stride
            if st.pool is not None:
                stride *= st.pool[1]
        return stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        stages = tuple(
            ConvStage(
                filters=s["filters"],
                kernel=s["kernel"],
                stride=s.get("stride", 1),
                padding=s.get("padding", 0),
                pool=tuple(s["pool"]) if s.get("pool") else None,
            )
            for s in d["stages"]
        )
        return ArchConfig(
            input_side=d["input_side"],
            stages=stages,
            head_widths=tuple(d["head_widths"]),
            head_pool=tuple(d["head_pool"]) if d.get("head_pool") else None,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    patience: int = 7
    max_epochs: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,train_acc,val_acc\n")
            for e in self.epochs:
                fh.write(f"{e.epoch},{e.train_loss:.6f},{e.train_acc:.6f},{e.val_acc:.6f}\n")


class _SiameseModule(nn.Module):
    """Single shared branch plus the pair head. Both patches of a pair run
    through the same branch object, so weight sharing is structural."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 1
        for st in arch.stages:
            layers.append(nn.Conv2d(in_ch, st.filters, st.kernel, st.stride, st.padding))
            layers.append(nn.ReLU())
            if st.pool is not None:
                layers.append(nn.MaxPool2d(st.pool[0], st.pool[1], ceil_mode=True))
            in_ch = st.filters
        self.features = nn.Sequential(*layers)
        self.head_pool = (
            nn.MaxPool2d(arch.head_pool[0], arch.head_pool[1], ceil_mode=True)
            if arch.head_pool is not None
            else nn.Identity()
        )
        head_layers: list[nn.Module] = []
        width = 2 * EMBED_DIM
        for i, out_w in enumerate(arch.head_widths):
            head_layers.append(nn.Linear(width, out_w))
            if i < len(arch.head_widths) - 1:
                head_layers.append(nn.ReLU())
            width = out_w
        self.head = nn.Sequential(*head_layers)

    def conv_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Extraction embedding: global average of the last conv activation."""
        return self.conv_map(x).mean(dim=(2, 3))

    def head_embed(self, x: torch.Tensor) -> torch.Tensor:
        """Pair-head embedding: the head-only pool precedes the average."""
        return self.head_pool(self.conv_map(x)).mean(dim=(2, 3))

    def pair_logit(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.head(torch.cat([self.head_embed(a), self.head_embed(b)], dim=1)).squeeze(1)


@dataclass
class ModelState:
    arch: ArchConfig
    module: _SiameseModule
    epoch: int = 0
    best_val_acc: float = 0.0

    def parameter_bytes(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.module.state_dict().items()}


def init_model(arch: ArchConfig, seed: int = 0) -> ModelState:
    """Fan-in-scaled uniform weights drawn from a seeded generator; zero biases."""
    arch.validate()
    module = _SiameseModule(arch)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x1217]))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=tuple(m.weight.shape))
                m.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                m.bias.zero_()
    module.eval()
    return ModelState(arch, module)


def _as_batch(patches: np.ndarray) -> torch.Tensor:
    arr = np.asarray(patches, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr).unsqueeze(1)


def _patch_pixels(patch) -> np.ndarray:
    return np.asarray(getattr(patch, "pixels", patch), dtype=np.float32)


def _check_side(model: ModelState, arr: np.ndarray) -> None:
    side = model.arch.input_side
    if arr.shape[-2:] != (side, side):
        raise ValueError(f"patch side {arr.shape[-2:]} does not match arch input {side}")


def branch_forward(model: ModelState, patch) -> tuple[np.ndarray, np.ndarray]:
    """Embed one patch; returns (512-vector, m x m x 512 conv activation)."""
    arr = _patch_pixels(patch)
    _check_side(model, arr)
    model.module.eval()
    with torch.no_grad():
        cm = model.module.conv_map(_as_batch(arr))
        emb = cm.mean(dim=(2, 3))
    conv_map = cm[0].permute(1, 2, 0).numpy()
    return emb[0].numpy(), conv_map


def embed_batch(model: ModelState, windows: np.ndarray) -> np.ndarray:
    """Extraction embeddings for a (B, p, p) stack of windows."""
    arr = np.asarray(windows, dtype=np.float32)
    _check_side(model, arr)
    model.module.eval()
    with torch.no_grad():
        return model.module.embed(_as_batch(arr)).numpy()


def pair_forward(model: ModelState, pair) -> float:
    """Similarity probability in (0, 1) for one patch pair (order matters)."""
    a = _patch_pixels(pair.a if hasattr(pair, "a") else pair[0])
    b = _patch_pixels(pair.b if hasattr(pair, "b") else pair[1])
    if a.shape != b.shape:
        raise ValueError(f"patch sizes differ: {a.shape} vs {b.shape}")
    _check_side(model, a)
    model.module.eval()
    with torch.no_grad():
        logit = model.module.pair_logit(_as_batch(a), _as_batch(b))
    return float(torch.sigmoid(logit)[0])


def _pair_tensors(pairs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    a = torch.from_numpy(np.stack([_patch_pixels(p.a) for p in pairs])).unsqueeze(1)
    b = torch.from_numpy(np.stack([_patch_pixels(p.b) for p in pairs])).unsqueeze(1)
    y = torch.tensor([float(p.label) for p in pairs])
    return a, b, y


def evaluate_pairs(model: ModelState, pairs, batch_size: int = 8) -> float:
    """Fraction of pairs where (probability >= 0.5) matches the label."""
    if not pairs:
        raise ValueError("cannot evaluate an empty pair set")
    model.module.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            a, b, y = _pair_tensors(pairs[i : i + batch_size])
            prob = torch.sigmoid(model.module.pair_logit(a, b))
            correct += int(((prob >= 0.5).float() == y).sum())
    return correct / len(pairs)


def train(
    model: ModelState, train_pairs, val_pairs, cfg: TrainConfig
) -> tuple[ModelState, TrainLog]:
    """Adam + binary cross-entropy with early stopping on validation accuracy.

    The best snapshot updates whenever validation accuracy reaches or beats
    the incumbent, so among tied epochs the later (lower-loss) weights win;
    training stops after `patience` epochs without such an update.
    """
    cfg.validate()
    if not train_pairs or not val_pairs:
        raise ValueError("need non-empty train and validation pair sets")
    module = model.module
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.BCEWithLogitsLoss()
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0x0BA7]))

    log = TrainLog()
    best_acc = -1.0
    best_state = None
    best_epoch = 0
    since_best = 0

    order = np.arange(len(train_pairs))
    for epoch in range(1, cfg.max_epochs + 1):
        order_rng.shuffle(order)
        module.train()
        total_loss = 0.0
        correct = 0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_pairs[j] for j in order[start : start + cfg.batch_size]]
            a, b, y = _pair_tensors(batch)
            opt.zero_grad()
            logits = module.pair_logit(a, b)
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(batch)
            correct += int(((torch.sigmoid(logits.detach()) >= 0.5).float() == y).sum())

        train_loss = total_loss / len(train_pairs)
        train_acc = correct / len(train_pairs)
        val_acc = evaluate_pairs(model, val_pairs, cfg.batch_size)
        log.epochs.append(EpochStats(epoch, train_loss, train_acc, val_acc))

        if val_acc >= best_acc:
            best_acc = val_acc
            best_state = copy.deepcopy(module.state_dict())
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break

    module.load_state_dict(best_state)
    module.eval()
    log.best_epoch = best_epoch
    best = ModelState(model.arch, module, epoch=best_epoch, best_val_acc=best_acc)
    return best, log


def save_checkpoint(model: ModelState, path) -> None:
    """Versioned binary container: magic, version, JSON header with the
    architecture and tensor table, checksummed raw float payload."""
    tensors = model.parameter_bytes()
    names = sorted(tensors)
    payload = bytearray()
    table = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    header = {
        "arch": model.arch.to_dict(),
        "meta": {"epoch": model.epoch, "best_val_acc": model.best_val_acc},
        "tensors": table,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    payload = raw[off + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")

    arch = ArchConfig.from_dict(header["arch"])
    model = init_model(arch, seed=0)
    state = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype=entry["dtype"]).reshape(
            entry["shape"]
        )
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.module.load_state_dict(state)
    model.module.eval()
    model.epoch = header["meta"].get("epoch", 0)
    model.best_val_acc = header["meta"].get("best_val_acc", 0.0)
    return model
