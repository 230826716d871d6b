"""Dense-tensor building blocks on top of torch autograd.

torch supplies the tensors and reverse-mode differentiation; everything
the policy composes (projections, layer norm, masked softmax, attention,
feed-forward blocks), the optimiser, the schedule, clipping and the
checkpoint format live here so their exact semantics are pinned.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMFL-CHECKPOINT 1\n"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class DegenerateDistributionError(ValueError):
    pass


def dtype_name(dtype: torch.dtype) -> str:
    for k, v in _DTYPES.items():
        if v == dtype:
            return k
    raise ConfigError(f"unsupported dtype {dtype}")


class ParameterStore:
    """Named parameters in insertion order plus Adam moments.

    Initial values are drawn in float64 from one generator seeded with
    ``seed`` and then cast, so the same seed gives the same weights in
    either precision.
    """

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float64):
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, torch.Tensor] = {}
        self.exp_avg: dict[str, torch.Tensor] = {}
        self.exp_avg_sq: dict[str, torch.Tensor] = {}
        self.step = 0
        self._gen = torch.Generator().manual_seed(seed)

    def _add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = value.to(self.dtype).requires_grad_(True)
        self.params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], bound: float) -> torch.Tensor:
        raw = torch.rand(shape, generator=self._gen, dtype=torch.float64)
        return self._add(name, (2.0 * raw - 1.0) * bound)

    def constant(self, name: str, shape: tuple[int, ...], value: float) -> torch.Tensor:
        return self._add(name, torch.full(shape, float(value), dtype=torch.float64))

    def add_linear(self, prefix: str, d_in: int, d_out: int, bias: bool = True) -> None:
        self.uniform(f"{prefix}.weight", (d_in, d_out), 1.0 / math.sqrt(d_in))
        if bias:
            self.constant(f"{prefix}.bias", (d_out,), 0.0)

    def add_layer_norm(self, prefix: str, d: int) -> None:
        self.constant(f"{prefix}.gamma", (d,), 1.0)
        self.constant(f"{prefix}.beta", (d,), 0.0)

    def add_attention(self, prefix: str, d: int) -> None:
        for proj in ("q", "k", "v", "o"):
            self.add_linear(f"{prefix}.{proj}", d, d)

    def add_ffn(self, prefix: str, d: int, hidden: int) -> None:
        self.add_linear(f"{prefix}.fc1", d, hidden)
        self.add_linear(f"{prefix}.fc2", hidden, d)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        """Parameters under ``prefix.`` keyed by the remaining suffix."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def numel(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            if t.grad is None:
                t.grad = torch.zeros_like(t)
            else:
                t.grad.zero_()

    def grad_vector(self) -> torch.Tensor:
        return torch.cat([
            (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1) for t in self.params.values()
        ])

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}


# ----------------------------------------------------------------- operators


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input shape {tuple(x.shape)} does not match weight shape {tuple(weight.shape)}")
    y = x @ weight
    return y if bias is None else y + bias


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps) * gamma + beta


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax that maps -inf to exactly 0 and refuses all -inf slices."""
    if bool(torch.isneginf(x).all(dim=dim).any()):
        raise DegenerateDistributionError("softmax over a slice whose entries are all -inf")
    return torch.softmax(x, dim=dim)


def multi_head_attention(
    query_src: torch.Tensor,
    key_src: torch.Tensor,
    value_src: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    heads: int,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads.

    ``params`` holds ``{q,k,v,o}.weight`` and ``.bias``. ``mask`` is a
    boolean tensor broadcastable to ``[..., Lq, Lk]``; False positions are
    set to -inf before the softmax.
    """
    d = query_src.shape[-1]
    if d % heads:
        raise ConfigError(f"embedding dim {d} is not divisible by heads={heads}")
    dh = d // heads

    def split(x, proj):
        y = linear(x, params[f"{proj}.weight"], params[f"{proj}.bias"])
        return y.reshape(*y.shape[:-1], heads, dh).transpose(-3, -2)

    q = split(query_src, "q")
    k = split(key_src, "k")
    v = split(value_src, "v")
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores.masked_fill(~mask.unsqueeze(-3), float("-inf"))
    weights = softmax(scores, dim=-1)
    out = (weights @ v).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], d)
    out = linear(out, params["o.weight"], params["o.bias"])
    return (out, weights) if return_weights else out


def ffn(x: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    hidden = torch.relu(linear(x, params["fc1.weight"], params["fc1.bias"]))
    return linear(hidden, params["fc2.weight"], params["fc2.bias"])


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


# ----------------------------------------------------------------- optimiser


def adam_step(
    store: ParameterStore,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Adam with decoupled weight decay (parameters shrink by ``lr * weight_decay``)."""
    missing = [k for k, t in store.items() if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:5]}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in store.items():
            g = p.grad
            m = store.exp_avg.setdefault(name, torch.zeros_like(p))
            v = store.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_epochs: int
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 <= min_lr <= base_lr (got {self.min_lr}, {self.base_lr})")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")


def cosine_lr(schedule: LrSchedule, epoch: float) -> float:
    total = schedule.total_epochs
    if not 0 <= epoch <= total:
        log.warning("cosine_lr: epoch %s outside [0, %s], clamped", epoch, total)
        epoch = min(max(epoch, 0), total)
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


def grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for t in store.params.values():
        if t.grad is not None:
            total += float(t.grad.double().pow(2).sum())
    return math.sqrt(total)


def clip_grad_norm(store: ParameterStore, max_norm: float = 1.0) -> float:
    """Scale all gradients by ``min(1, max_norm / norm)``; returns that scale."""
    norm = grad_norm(store)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    with torch.no_grad():
        for t in store.params.values():
            if t.grad is not None:
                t.grad.mul_(scale)
    return scale


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, store: ParameterStore, epoch: int = 0, meta: dict | None = None) -> None:
    """Write magic line, one-line JSON header, then raw little-endian tensors.

    Tensors appear in header order: every parameter as ``param/<name>``,
    followed by ``adam_m/<name>`` and ``adam_v/<name>`` for parameters that
    have optimiser state.
    """
    prec = dtype_name(store.dtype)
    np_dtype = "<f8" if prec == "float64" else "<f4"
    entries = [(f"param/{k}", v) for k, v in store.items()]
    entries += [(f"adam_m/{k}", v) for k, v in store.exp_avg.items()]
    entries += [(f"adam_v/{k}", v) for k, v in store.exp_avg_sq.items()]
    header = {
        "version": 1,
        "precision": prec,
        "seed": store.seed,
        "epoch": epoch,
        "adam_step": store.step,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in entries],
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, v in entries:
            fh.write(v.detach().cpu().numpy().astype(np_dtype).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an MMFL checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1:]
    prec = header["precision"]
    np_dtype = "<f8" if prec == "float64" else "<f4"
    itemsize = np.dtype(np_dtype).itemsize
    store = ParameterStore(header["seed"], _DTYPES[prec])
    store.step = header["adam_step"]
    offset = 0
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=np_dtype, count=count, offset=offset).reshape(ent["shape"])
        offset += count * itemsize
        t = torch.from_numpy(arr.copy()).to(store.dtype)
        kind, name = ent["name"].split("/", 1)
        if kind == "param":
            store.params[name] = t.requires_grad_(True)
        elif kind == "adam_m":
            store.exp_avg[name] = t
        else:
            store.exp_avg_sq[name] = t
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes after tensors")
    return store, header
