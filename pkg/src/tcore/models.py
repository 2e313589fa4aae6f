"""Encoder, classification head, parameter groups and training loops.

The encoder is a stack of ``conv3x3 -> channel mask -> normalization -> ReLU
-> maxpool`` blocks followed by global average pooling.  Each block owns

* ``weight``/``bias``: the conv filters (group ``encoder``),
* ``gamma``/``beta``: the normalization affine (groups ``encoder`` and ``norm``),
* ``mask``: one scalar per output channel (group ``masks``),
* optional ``psi_*`` tensors holding replacement rows for untrusted channels
  (group ``psi``).  When present they are scattered over the base tensors in
  the forward pass, so the base rows of trusted channels are never touched.

After pretraining the encoder always runs in evaluation mode: normalization
uses the running statistics frozen at the end of pretraining.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import ContractViolation, FormatError, ParameterError, TrainingDiverged

GROUPS = ("head", "encoder", "norm", "masks", "psi")
TAP_NAMES = ("encoder", "head1", "head2")
NORM_EPS = 1e-5


@dataclass
class EncoderConfig:
    block_channels: Tuple[int, ...] = (32, 64, 128, 256)
    in_channels: int = 3

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) < 2 or min(self.block_channels) < 8:
            raise ParameterError("encoder needs >= 2 blocks, each at least 8 channels wide")

    @property
    def embedding_dim(self) -> int:
        return self.block_channels[-1]


@dataclass
class HeadConfig:
    embedding_dim: int = 256
    hidden1: int = 256
    hidden2: int = 128
    num_classes: int = 10


@dataclass
class TrainOpts:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    rng_seed: int = 0
    deterministic: bool = False
    groups: Tuple[str, ...] = ("head",)

    def __post_init__(self):
        self.groups = tuple(self.groups)
        unknown = set(self.groups) - set(GROUPS)
        if unknown:
            raise ParameterError(f"unknown parameter groups {sorted(unknown)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **kw) -> "TrainOpts":
        d = asdict(self)
        d.update(kw)
        return TrainOpts(**d)


def _uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * (2 * bound) - bound)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = nn.Parameter(torch.zeros(out_ch, in_ch, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.gamma = nn.Parameter(torch.ones(out_ch))
        self.beta = nn.Parameter(torch.zeros(out_ch))
        self.mask = nn.Parameter(torch.ones(out_ch))
        self.register_buffer("running_mean", torch.zeros(out_ch))
        self.register_buffer("running_var", torch.ones(out_ch))
        self.register_buffer("psi_index", torch.zeros(0, dtype=torch.long))
        self.register_buffer("psi_mean", torch.zeros(0))
        self.register_buffer("psi_var", torch.ones(0))
        self.psi_weight = nn.Parameter(torch.zeros(0, in_ch, 3, 3))
        self.psi_bias = nn.Parameter(torch.zeros(0))
        self.psi_gamma = nn.Parameter(torch.zeros(0))
        self.psi_beta = nn.Parameter(torch.zeros(0))
        self.momentum = 0.1

    def init_filters(self, gen: torch.Generator, rows: Optional[torch.Tensor] = None) -> torch.Tensor:
        """He-uniform filters for ``rows`` (all rows if None); returns the draw."""
        n = self.out_ch if rows is None else len(rows)
        w = torch.empty(n, self.in_ch, 3, 3)
        _uniform_(w, math.sqrt(6.0 / (self.in_ch * 9)), gen)
        if rows is None:
            with torch.no_grad():
                self.weight.copy_(w)
                self.bias.zero_()
        return w

    def effective(self) -> Tuple[torch.Tensor, ...]:
        w, b, g, bt = self.weight, self.bias, self.gamma, self.beta
        if self.psi_index.numel():
            idx = self.psi_index
            w = w.index_copy(0, idx, self.psi_weight)
            b = b.index_copy(0, idx, self.psi_bias)
            g = g.index_copy(0, idx, self.psi_gamma)
            bt = bt.index_copy(0, idx, self.psi_beta)
        return w, b, g, bt

    def statistics(self) -> Tuple[torch.Tensor, torch.Tensor]:
        mean, var = self.running_mean, self.running_var
        if self.psi_index.numel() and self.psi_mean.numel():
            mean = mean.index_copy(0, self.psi_index, self.psi_mean)
            var = var.index_copy(0, self.psi_index, self.psi_var)
        return mean, var

    def conv_response(self, x: torch.Tensor) -> torch.Tensor:
        """Masked conv output before normalization."""
        w, b, _, _ = self.effective()
        return F.conv2d(x, w, b, padding=1) * self.mask.view(1, -1, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, g, bt = self.effective()
        z = self.conv_response(x)
        if self.training:
            mean = z.mean(dim=(0, 2, 3))
            var = z.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                n = z.numel() / z.shape[1]
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var * n / max(n - 1, 1))
        else:
            mean, var = self.statistics()
        z = (z - mean.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + NORM_EPS)
        z = z * g.view(1, -1, 1, 1) + bt.view(1, -1, 1, 1)
        return F.max_pool2d(F.relu(z), 2)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        chans = (config.in_channels,) + config.block_channels
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(chans[:-1], chans[1:]))

    def reset(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for block in self.blocks:
            block.init_filters(gen)

    def forward(self, x: torch.Tensor, return_blocks: bool = False):
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        emb = x.mean(dim=(2, 3))
        return (emb, outs) if return_blocks else emb


class Head(nn.Module):
    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.embedding_dim, config.hidden1)
        self.fc2 = nn.Linear(config.hidden1, config.hidden2)
        self.fc3 = nn.Linear(config.hidden2, config.num_classes)

    def reset(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for fc in (self.fc1, self.fc2, self.fc3):
            bound = 1.0 / math.sqrt(fc.in_features)
            _uniform_(fc.weight, bound, gen)
            _uniform_(fc.bias, bound, gen)

    def forward_taps(self, emb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h1 = F.relu(self.fc1(emb))
        h2 = F.relu(self.fc2(h1))
        return self.fc3(h2), h1, h2

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.forward_taps(emb)[0]


class TapModel(nn.Module):
    """Encoder followed by head, with activation taps (encoder, head1, head2)."""

    def __init__(self, encoder: Encoder, head: Head):
        super().__init__()
        if encoder.config.embedding_dim != head.config.embedding_dim:
            raise ParameterError("head input width must equal encoder embedding width")
        self.encoder = encoder
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.config.num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))

    def forward_with_taps(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        emb = self.encoder(x)
        logits, h1, h2 = self.head.forward_taps(emb)
        return logits, [emb, h1, h2]

    def activations(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.forward_with_taps(x)[1]

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("head."):
                groups["head"].append((name, p))
            elif leaf.startswith("psi_"):
                groups["psi"].append((name, p))
            elif leaf == "mask":
                groups["masks"].append((name, p))
            else:
                groups["encoder"].append((name, p))
                if leaf in ("gamma", "beta"):
                    groups["norm"].append((name, p))
        return groups


def build_model(enc_cfg: EncoderConfig, head_cfg: HeadConfig, seed: int = 0) -> TapModel:
    enc = Encoder(enc_cfg)
    enc.reset(seed)
    head = Head(head_cfg)
    head.reset(seed + 1)
    return TapModel(enc, head).eval()


def attach_head(encoder: Encoder, num_classes: int, seed: int, head_cfg: Optional[HeadConfig] = None) -> TapModel:
    """Fresh randomly initialised head on a deep copy of ``encoder``."""
    cfg = head_cfg or HeadConfig(embedding_dim=encoder.config.embedding_dim, num_classes=num_classes)
    head = Head(cfg)
    head.reset(seed)
    return TapModel(copy.deepcopy(encoder), head).eval()


# --------------------------------------------------------------------------- groups & hashing


def select_trainable(model: TapModel, groups: Iterable[str]) -> List[nn.Parameter]:
    groups = set(groups)
    out = []
    for g, members in model.parameter_groups().items():
        for _, p in members:
            if g in groups:
                out.append(p)
    chosen = {id(p) for p in out}
    for p in model.parameters():
        p.requires_grad_(id(p) in chosen)
    # a parameter can sit in two groups (norm is a subset of encoder)
    uniq, seen = [], set()
    for p in out:
        if id(p) not in seen:
            seen.add(id(p))
            uniq.append(p)
    return uniq


def group_hash(model: TapModel, groups: Iterable[str]) -> str:
    """SHA-256 over the named tensors of ``groups`` (encoder group includes norm statistics)."""
    h = hashlib.sha256()
    pg = model.parameter_groups()
    names = sorted({name for g in groups for name, _ in pg[g]})
    params = dict(model.named_parameters())
    for name in names:
        h.update(name.encode())
        h.update(params[name].detach().cpu().numpy().tobytes())
    if "encoder" in groups:
        for name, buf in sorted(model.encoder.named_buffers()):
            h.update(name.encode())
            h.update(buf.cpu().numpy().tobytes())
    return h.hexdigest()


def model_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- forward helpers


def set_determinism(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def as_tensor(images: np.ndarray) -> torch.Tensor:
    arr = np.ascontiguousarray(images, dtype=np.float32)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr)


def forward_with_taps(model: TapModel, batch) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Evaluation-mode logits and tap activations for ``batch`` (N x C x H x W)."""
    x = batch if isinstance(batch, torch.Tensor) else as_tensor(batch)
    cin = model.encoder.config.in_channels
    if x.ndim != 4 or x.shape[1] != cin:
        raise ParameterError(f"expected batch N x {cin} x H x W, got {tuple(x.shape)}")
    model.eval()
    with torch.no_grad():
        return model.forward_with_taps(x)


@torch.no_grad()
def embed(encoder: Encoder, images: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    encoder.eval()
    out = [encoder(as_tensor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, encoder.config.embedding_dim)


@torch.no_grad()
def predict_logits(model: TapModel, images: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    model.eval()
    out = [model(as_tensor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, model.num_classes)


def predict(model: TapModel, images: np.ndarray) -> np.ndarray:
    return predict_logits(model, images).argmax(1).numpy()


def per_sample_losses(model: TapModel, dataset: LabeledDataset, ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Cross-entropy per id, in the order of ``ids`` (all samples if None)."""
    pos = np.arange(len(dataset)) if ids is None else dataset.positions(ids)
    logits = predict_logits(model, dataset.images[pos])
    y = torch.from_numpy(dataset.labels[pos])
    return F.cross_entropy(logits, y, reduction="none").numpy().astype(np.float64)


def head_losses(model: TapModel, emb: torch.Tensor, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy from cached embeddings."""
    model.eval()
    with torch.no_grad():
        logits = model.head(emb)
    return F.cross_entropy(logits, torch.from_numpy(np.array(labels, dtype=np.int64)), reduction="none").numpy().astype(np.float64)


# --------------------------------------------------------------------------- training


def make_optimizer(params: List[nn.Parameter], opts: TrainOpts) -> torch.optim.Optimizer:
    if opts.optimizer == "adam":
        return torch.optim.Adam(params, lr=opts.learning_rate, weight_decay=opts.weight_decay)
    return torch.optim.SGD(params, lr=opts.learning_rate, momentum=opts.momentum, weight_decay=opts.weight_decay)


def fit(
    model: TapModel,
    images: np.ndarray,
    labels: np.ndarray,
    opts: TrainOpts,
    *,
    features: Optional[torch.Tensor] = None,
    train_mode: bool = False,
    optimizer: Optional[torch.optim.Optimizer] = None,
    after_step: Optional[Callable[[], None]] = None,
    loss_sign: float = 1.0,
) -> List[float]:
    """Mini-batch training of the groups in ``opts.groups``.

    Head-only runs reuse cached encoder embeddings (``features``, computed if
    absent).  ``loss_sign=-1`` turns descent into ascent.  Returns the mean
    loss of each epoch.
    """
    params = select_trainable(model, opts.groups)
    if not params:
        raise ContractViolation("no trainable parameters selected")
    head_only = set(opts.groups) <= {"head"}
    if head_only and features is None:
        features = embed(model.encoder, images)
    inputs = features if head_only else as_tensor(images)
    y_all = torch.from_numpy(np.array(labels, dtype=np.int64))
    opt = optimizer or make_optimizer(params, opts)
    gen = torch.Generator().manual_seed(opts.rng_seed)
    n = len(y_all)
    history = []
    model.train(train_mode)
    try:
        for _ in range(opts.epochs):
            perm = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, opts.batch_size):
                idx = perm[start:start + opts.batch_size]
                logits = model.head(inputs[idx]) if head_only else model(inputs[idx])
                loss = F.cross_entropy(logits, y_all[idx])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss.item()}")
                opt.zero_grad(set_to_none=True)
                (loss_sign * loss).backward()
                opt.step()
                if after_step is not None:
                    after_step()
                total += loss.item() * len(idx)
            history.append(total / max(n, 1))
    finally:
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
    return history


def train_head(model: TapModel, dataset: LabeledDataset, opts: TrainOpts,
               features: Optional[torch.Tensor] = None) -> TapModel:
    """Train the head on a frozen encoder (in place); returns ``model``."""
    if set(opts.groups) != {"head"}:
        raise ContractViolation(f"train_head only trains the head, selector was {opts.groups}")
    if opts.epochs == 0 or len(dataset) == 0:
        return model
    fit(model, dataset.images, dataset.labels, opts, features=features)
    return model


def pretrain_encoder(pretrain_split: LabeledDataset, config: EncoderConfig, opts: TrainOpts) -> Encoder:
    """Supervised pretraining of a fresh encoder with a throwaway linear head."""
    if len(pretrain_split) == 0:
        raise ParameterError("pretrain split is empty")
    if opts.deterministic:
        set_determinism(True)
    enc = Encoder(config)
    enc.reset(opts.rng_seed)
    if opts.epochs == 0:
        return enc.eval()
    throwaway = _LinearProbe(config.embedding_dim, pretrain_split.num_classes, opts.rng_seed + 1)
    for p in enc.parameters():
        p.requires_grad_(False)
    params = [t for b in enc.blocks for t in (b.weight, b.bias, b.gamma, b.beta)]
    params += list(throwaway.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = make_optimizer(params, opts)
    gen = torch.Generator().manual_seed(opts.rng_seed)
    x_all = as_tensor(pretrain_split.images)
    y_all = torch.from_numpy(pretrain_split.labels.astype(np.int64))
    n = len(y_all)
    enc.train()
    for _ in range(opts.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, opts.batch_size):
            idx = perm[start:start + opts.batch_size]
            loss = F.cross_entropy(throwaway(enc(x_all[idx])), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite pretraining loss {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


class _LinearProbe(nn.Module):
    def __init__(self, dim: int, num_classes: int, seed: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_classes)
        gen = torch.Generator().manual_seed(seed)
        _uniform_(self.fc.weight, 1 / math.sqrt(dim), gen)
        _uniform_(self.fc.bias, 1 / math.sqrt(dim), gen)

    def forward(self, x):
        return self.fc(x)


# --------------------------------------------------------------------------- checkpoints


def _tensor_entries(model: TapModel):
    groups = {name: g for g, members in model.parameter_groups().items() for name, _ in members if g != "norm"}
    for name, p in model.named_parameters():
        yield name, p, groups[name], "<f4"
    for name, b in model.named_buffers():
        yield name, b, "buffer", "<i8" if b.dtype == torch.long else "<f4"


def save_model(model: TapModel, directory, seed: Optional[int] = None, **extra) -> Path:
    """Directory with manifest.json and one raw little-endian file per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t, group, dtype in _tensor_entries(model):
        fname = name.replace(".", "_") + (".i64" if dtype == "<i8" else ".f32")
        t.detach().cpu().numpy().astype(dtype).tofile(d / fname)
        entries.append({"name": name, "group": group, "shape": list(t.shape), "dtype": dtype, "file": fname})
    manifest = {
        "encoder_config": {"block_channels": list(model.encoder.config.block_channels),
                           "in_channels": model.encoder.config.in_channels},
        "head_config": asdict(model.head.config),
        "groups": list(GROUPS),
        "seed": seed,
        "tensors": entries,
        **extra,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def load_model(directory) -> TapModel:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read model manifest in {d}: {exc}") from exc
    model = TapModel(Encoder(EncoderConfig(**manifest["encoder_config"])), Head(HeadConfig(**manifest["head_config"])))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for e in manifest["tensors"]:
        arr = np.fromfile(d / e["file"], dtype=e["dtype"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.int64 if e["dtype"] == "<i8" else np.float32))
        mod_name, leaf = e["name"].rsplit(".", 1)
        module = model.get_submodule(mod_name)
        if e["name"] in params:
            setattr(module, leaf, nn.Parameter(t, requires_grad=False))
        elif e["name"] in buffers:
            module.register_buffer(leaf, t)
        else:
            raise FormatError(f"unexpected tensor {e['name']} in checkpoint")
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def save_encoder(encoder: Encoder, directory, seed: Optional[int] = None) -> Path:
    stub = TapModel(encoder, Head(HeadConfig(embedding_dim=encoder.config.embedding_dim, num_classes=2)))
    return save_model(stub, directory, seed=seed, encoder_only=True)


def load_encoder(directory) -> Encoder:
    return load_model(directory).encoder
