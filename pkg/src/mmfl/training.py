"""REINFORCE with a per-instance shared baseline, epoch loop and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import nn
from .instance import GeneratorSpec, GtspInstance, generate_dataset, generate_instance
from .policy import MMFLPolicy, PolicyConfig, group_by_shape, load_policy, rollout_count, save_policy
from .rng import derive_seed

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "val_cost", "train_reward", "lr", "seconds")
_SAMPLER_TAG = 1 << 20


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    instances_per_epoch: int = 2000
    batch_size: int = 64
    rollouts: int | None = None  # default max(1, n // 4)
    base_lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    n: int = 20
    m: int | None = 4
    family: str = "scale"
    eval_count: int = 30
    eval_seed: int = 10_000
    seed: int = 0
    dtype: str = "float32"
    deterministic: bool = True
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            object.__setattr__(self, "policy", PolicyConfig(**self.policy))
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.instances_per_epoch < 1:
            problems.append("instances_per_epoch must be >= 1")
        if self.rollouts is not None and self.rollouts < 1:
            problems.append("rollouts must be >= 1")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype}")
        if problems:
            raise nn.ConfigError("; ".join(problems))

    @property
    def k(self) -> int:
        return self.rollouts if self.rollouts is not None else rollout_count(self.n)

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.instances_per_epoch / self.batch_size)

    @property
    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(self.n, self.m, self.family, 0)

    def schedule(self) -> nn.LrSchedule:
        return nn.LrSchedule(self.base_lr, self.epochs, self.min_lr)

    def to_dict(self) -> dict:
        return asdict(self)


DESK_POLICY = PolicyConfig(embed_dim=64, heads=4, graph_layers=2, image_layers=2, fusion_layers=2)
PAPER_POLICY = PolicyConfig()

PRESETS: dict[str, TrainConfig] = {
    "desk": TrainConfig(
        epochs=20,
        instances_per_epoch=2000,
        batch_size=64,
        rollouts=5,
        base_lr=1e-4,
        n=20,
        m=4,
        family="scale",
        policy=DESK_POLICY,
    ),
    "paper": TrainConfig(
        epochs=200,
        instances_per_epoch=100_000,
        batch_size=128,
        rollouts=None,
        base_lr=1e-4,
        n=100,
        m=20,
        family="scale",
        policy=PAPER_POLICY,
    ),
}


@dataclass
class EpochRecord:
    epoch: int
    val_cost: float
    train_reward: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_cost: float | None = None

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise TrainingError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def to_csv(self, path, include_time: bool = True) -> None:
        fields = CSV_FIELDS if include_time else CSV_FIELDS[:-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in self.records:
                row = [r.epoch, repr(r.val_cost), repr(r.train_reward), repr(r.lr), f"{r.seconds:.3f}"]
                w.writerow(row[: len(fields)])

    def to_timing_csv(self, path) -> None:
        """Wall-clock seconds per epoch, kept apart from the deterministic log."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "seconds"))
            for r in self.records:
                w.writerow((r.epoch, f"{r.seconds:.3f}"))

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(EpochRecord(
                    int(row["epoch"]),
                    float(row["val_cost"]),
                    float(row["train_reward"]),
                    float(row["lr"]),
                    float(row.get("seconds") or 0.0),
                ))
        return out


@dataclass(frozen=True)
class BatchStats:
    loss: float
    mean_reward: float
    grad_norm: float
    clipped_norm: float
    clip_scale: float


@dataclass(frozen=True)
class EvalResult:
    costs: tuple[float, ...]
    mean: float
    seconds: float


# ------------------------------------------------------------------ gradient


def shared_baseline(rewards) -> torch.Tensor | float:
    """Mean over the last axis, computed as ``r0 + mean(r - r0)``.

    The shift makes the baseline bit-equal to the rewards whenever all
    rollouts of an instance tie, so their advantages are exactly zero.
    """
    if isinstance(rewards, torch.Tensor):
        if rewards.shape[-1] == 0:
            raise nn.ContractError("shared_baseline of zero rollouts")
        ref = rewards[..., :1]
        return ref + (rewards - ref).mean(dim=-1, keepdim=True)
    rewards = [float(r) for r in rewards]
    if not rewards:
        raise nn.ContractError("shared_baseline of zero rollouts")
    ref = rewards[0]
    return ref + math.fsum(r - ref for r in rewards) / len(rewards)


def reinforce_loss(log_prob: torch.Tensor, reward: torch.Tensor) -> torch.Tensor:
    """``-(1/kN) sum_ij (R_ij - b_i) log p_ij`` for ``[N, k]`` inputs.

    Minimising it ascends the expected reward.
    """
    advantage = (reward - shared_baseline(reward)).to(log_prob.dtype)
    return -(advantage.detach() * log_prob).sum() / log_prob.numel()


def optimizer_step(store: nn.ParameterStore, loss: torch.Tensor, lr: float, config: TrainConfig) -> tuple[float, float, float]:
    store.zero_grad()
    nn.backward(loss)
    pre = nn.grad_norm(store)
    scale = nn.clip_grad_norm(store, config.clip_norm)
    post = nn.grad_norm(store)
    nn.adam_step(store, lr, config.weight_decay)
    return pre, post, scale


def reinforce_update(
    policy: MMFLPolicy,
    instances: Sequence[GtspInstance],
    config: TrainConfig,
    lr: float,
    generator: torch.Generator | None = None,
) -> BatchStats:
    """Sample ``k`` rollouts per instance, then take one clipped Adam step."""
    total = None
    count = 0
    reward_sum = 0.0
    for idx in group_by_shape(instances, len(instances)):
        group = [instances[i] for i in idx]
        r = policy.rollout_batch(group, config.k, "sample", generator)
        reward = -r.cost
        part = reinforce_loss(r.log_prob, reward) * r.log_prob.numel()
        total = part if total is None else total + part
        count += r.log_prob.numel()
        reward_sum += float(reward.sum())
    loss = total / count
    if not torch.isfinite(loss):
        seeds = [x.seed for x in instances]
        raise TrainingError(f"non-finite loss {float(loss.detach())} on batch with instance seeds {seeds[:8]}...")
    pre, post, scale = optimizer_step(policy.store, loss, lr, config)
    return BatchStats(float(loss.detach()), reward_sum / count, pre, post, scale)


# ---------------------------------------------------------------- evaluation


def evaluate(policy: MMFLPolicy, instances: Sequence[GtspInstance]) -> EvalResult:
    t0 = time.perf_counter()
    tours = policy.greedy_solve_many(instances)
    seconds = time.perf_counter() - t0
    costs = tuple(t.cost for t in tours)
    return EvalResult(costs, math.fsum(costs) / len(costs), seconds)


def validation_set(config: TrainConfig) -> list[GtspInstance]:
    spec = GeneratorSpec(config.n, config.m, config.family, config.eval_seed)
    return generate_dataset(spec, config.eval_count)


def batch_instances(config: TrainConfig, epoch: int, batch: int) -> list[GtspInstance]:
    start = batch * config.batch_size
    size = min(config.batch_size, config.instances_per_epoch - start)
    spec = config.generator_spec
    return [generate_instance(spec.with_seed(derive_seed(config.seed, epoch, batch, i))) for i in range(size)]


def batch_generator(config: TrainConfig, epoch: int, batch: int) -> torch.Generator:
    seed = derive_seed(config.seed, epoch, batch, _SAMPLER_TAG) & ((1 << 63) - 1)
    return torch.Generator().manual_seed(seed)


# --------------------------------------------------------------------- train


def _dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


def train(
    config: TrainConfig,
    out_dir=None,
    resume: bool = False,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[MMFLPolicy, TrainLog]:
    """Run the full epoch loop.

    With ``out_dir`` set, writes ``epoch_XXXX.ckpt``, ``latest.ckpt``,
    ``train_log.csv``, ``timing.csv`` and ``summary.json`` there after
    every epoch. Everything except ``timing.csv`` is deterministic.
    ``resume`` continues from ``latest.ckpt``.
    """
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    val = validation_set(config)
    tlog = TrainLog()
    start_epoch = 0
    if resume:
        if out is None or not (out / "latest.ckpt").exists():
            raise TrainingError(f"nothing to resume in {out}")
        policy, header = load_policy(out / "latest.ckpt")
        saved = header["meta"].get("train_config")
        if saved is not None and TrainConfig(**saved) != config:
            raise TrainingError(f"resume conflict: {out / 'latest.ckpt'} was written with a different TrainConfig")
        start_epoch = header["epoch"]
        tlog = TrainLog.from_csv(out / "train_log.csv")
        tlog.records = [r for r in tlog.records if r.epoch <= start_epoch]
        tlog.initial_val_cost = header["meta"].get("initial_val_cost")
    else:
        policy = MMFLPolicy(config.policy, seed=config.seed, dtype=_dtype(config.dtype))
        tlog.initial_val_cost = evaluate(policy, val).mean

    schedule = config.schedule()
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        lr = nn.cosine_lr(schedule, epoch)
        rewards = []
        for b in range(config.batches_per_epoch):
            stats = reinforce_update(policy, batch_instances(config, epoch, b), config, lr, batch_generator(config, epoch, b))
            rewards.append(stats.mean_reward)
        res = evaluate(policy, val)
        rec = EpochRecord(epoch + 1, res.mean, math.fsum(rewards) / len(rewards), lr, time.perf_counter() - t0)
        tlog.append(rec)
        log.info("epoch %d val %.4f reward %.4f lr %.2e (%.1fs)", rec.epoch, rec.val_cost, rec.train_reward, lr, rec.seconds)
        if out is not None:
            meta = {"train_config": config.to_dict(), "initial_val_cost": tlog.initial_val_cost}
            save_policy(out / f"epoch_{rec.epoch:04d}.ckpt", policy, rec.epoch, meta)
            save_policy(out / "latest.ckpt", policy, rec.epoch, meta)
            tlog.to_csv(out / "train_log.csv", include_time=False)
            tlog.to_timing_csv(out / "timing.csv")
            (out / "summary.json").write_text(json.dumps({
                "initial_val_cost": tlog.initial_val_cost,
                "final_val_cost": rec.val_cost,
                "epochs": rec.epoch,
            }, indent=2) + "\n")
        if progress is not None:
            progress(rec)
    return policy, tlog


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Copy of ``config`` with non-None overrides; ``policy.*`` keys go to the policy."""
    pol = {k[7:]: v for k, v in overrides.items() if k.startswith("policy.") and v is not None}
    top = {k: v for k, v in overrides.items() if not k.startswith("policy.") and v is not None}
    if pol:
        top["policy"] = replace(config.policy, **pol)
    return replace(config, **top)
