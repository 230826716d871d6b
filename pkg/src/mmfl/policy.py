"""Multimodal constructive policy: graph encoder, image encoder, bottleneck
fusion and the masked multi-start decoder.

Everything works on batches of instances that share ``n`` and ``m``; the
decoder carries a second batch axis for the ``k`` parallel rollouts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import nn
from .image import ars_dims, build_image, extract_patches
from .instance import GtspInstance, Tour

log = logging.getLogger(__name__)


class DecodingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 128
    graph_layers: int = 3
    image_layers: int = 3
    fusion_layers: int = 3
    heads: int = 8
    bottleneck_tokens: int = 10
    patch_size: int = 16
    ars_alpha: float = 2.0
    fusion_weight: float = 0.5
    context_weight: float = 0.3
    logit_clip: float = 10.0
    ffn_mult: int = 4
    disable_image: bool = False
    disable_fusion: bool = False

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise nn.ConfigError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        counts = dict(
            embed_dim=self.embed_dim,
            graph_layers=self.graph_layers,
            image_layers=self.image_layers,
            fusion_layers=self.fusion_layers,
            heads=self.heads,
            bottleneck_tokens=self.bottleneck_tokens,
            patch_size=self.patch_size,
            ffn_mult=self.ffn_mult,
        )
        bad = [k for k, v in counts.items() if v < 1]
        if bad:
            raise nn.ConfigError(f"must be >= 1: {bad}")
        if not self.logit_clip > 0 or not self.ars_alpha > 0:
            raise nn.ConfigError("logit_clip and ars_alpha must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Tensor view of instances sharing ``n`` and ``m``."""

    instances: list[GtspInstance]
    features: torch.Tensor  # [B, n, 3]
    cluster: torch.Tensor  # [B, n] long
    depot: torch.Tensor  # [B] long
    dist: torch.Tensor  # [B, n, n] float64
    patches: torch.Tensor | None  # [B, N, w*w]
    patch_coords: torch.Tensor | None  # [N, 2]
    n: int
    m: int

    @property
    def size(self) -> int:
        return len(self.instances)


@dataclass
class EncoderOutput:
    h_graph: torch.Tensor  # graph encoder output [B, n, d]
    h_image: torch.Tensor | None  # image encoder output [B, N, d]
    h_graph_out: torch.Tensor  # after fusion
    h_image_out: torch.Tensor | None
    h_fused: torch.Tensor  # [B, n, d]
    g: torch.Tensor  # [B, d]


@dataclass
class DecoderState:
    t: int
    tour: list[torch.Tensor]  # t tensors of shape [B, k]
    node_visited: torch.Tensor  # [B, k, n] bool
    cluster_visited: torch.Tensor  # [B, k, m] bool

    @property
    def last(self) -> torch.Tensor:
        return self.tour[-1]


@dataclass
class StepTrace:
    logits: torch.Tensor  # [B, k, n], -inf where masked
    probs: torch.Tensor
    eligible: torch.Tensor


@dataclass
class Rollouts:
    tours: torch.Tensor  # [B, k, m] long
    log_prob: torch.Tensor  # [B, k], differentiable
    cost: torch.Tensor  # [B, k] float64
    step_log_probs: torch.Tensor  # [B, k, m]
    trace: list[StepTrace] = field(default_factory=list)

    @property
    def reward(self) -> torch.Tensor:
        return -self.cost


@dataclass(frozen=True)
class RolloutResult:
    tour: Tour
    log_prob: float
    reward: float


def rollout_count(n: int) -> int:
    return max(1, n // 4)


class MMFLPolicy:
    def __init__(
        self,
        config: PolicyConfig = PolicyConfig(),
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
        store: nn.ParameterStore | None = None,
    ):
        self.config = config
        if store is None:
            store = nn.ParameterStore(seed, dtype)
            self._build(store)
        self.store = store

    @property
    def dtype(self) -> torch.dtype:
        return self.store.dtype

    def _build(self, s: nn.ParameterStore) -> None:
        c = self.config
        d = c.embed_dim
        hidden = c.ffn_mult * d
        s.add_linear("graph.embed", 3, d)
        for i in range(c.graph_layers):
            self._add_block(s, f"graph.{i}", d, hidden)
        s.add_linear("image.patch", c.patch_size * c.patch_size, d)
        s.add_linear("image.pos.fc1", 2, d)
        s.add_linear("image.pos.fc2", d, d)
        for i in range(c.image_layers):
            self._add_block(s, f"image.{i}", d, hidden)
        bound = 1.0 / math.sqrt(d)
        for i in range(c.fusion_layers):
            p = f"fusion.{i}"
            s.uniform(f"{p}.b_graph", (c.bottleneck_tokens, d), bound)
            s.uniform(f"{p}.b_image", (c.bottleneck_tokens, d), bound)
            for side in ("graph", "image"):
                s.add_attention(f"{p}.{side}.attn", d)
                s.add_layer_norm(f"{p}.{side}.ln", d)
                s.add_ffn(f"{p}.{side}.ffn", d, hidden)
        s.add_linear("decoder.q_graph", d, d, bias=False)
        s.add_linear("decoder.q_last", d, d, bias=False)
        s.add_linear("decoder.key", d, d, bias=False)

    @staticmethod
    def _add_block(s, prefix, d, hidden):
        s.add_attention(f"{prefix}.attn", d)
        s.add_layer_norm(f"{prefix}.ln1", d)
        s.add_ffn(f"{prefix}.ffn", d, hidden)
        s.add_layer_norm(f"{prefix}.ln2", d)

    # ------------------------------------------------------------ batching

    def prepare(self, instances: Sequence[GtspInstance]) -> Batch:
        instances = list(instances)
        n, m = instances[0].n, instances[0].m
        if any(x.n != n or x.m != m for x in instances):
            raise ValueError("a batch must share n and m; group instances with group_by_shape()")
        dt = self.dtype
        coords = np.stack([x.coords for x in instances])
        clusters = np.stack([x.cluster_of for x in instances])
        feats = np.concatenate([coords, (clusters / m)[..., None]], axis=-1)
        patches = coords_t = None
        if not (self.config.disable_image or self.config.disable_fusion):
            w = self.config.patch_size
            side, _ = ars_dims(n, w, self.config.ars_alpha)
            grids = []
            for x in instances:
                img = build_image(x, side, side, w)
                grids.append(extract_patches(img, img.normalized()))
            patches = torch.from_numpy(np.stack([g.patches for g in grids])).to(dt)
            coords_t = torch.from_numpy(grids[0].patch_coords).to(dt)
        return Batch(
            instances,
            torch.from_numpy(feats).to(dt),
            torch.from_numpy(clusters).long(),
            torch.tensor([x.depot for x in instances], dtype=torch.long),
            torch.from_numpy(np.stack([x.distances for x in instances])),
            patches,
            coords_t,
            n,
            m,
        )

    # ------------------------------------------------------------- encoders

    def _block(self, prefix: str, h: torch.Tensor) -> torch.Tensor:
        p = self.store.group(prefix)
        attn = nn.multi_head_attention(h, h, h, _sub(p, "attn"), self.config.heads)
        h = nn.layer_norm(h + attn, p["ln1.gamma"], p["ln1.beta"])
        h = nn.layer_norm(h + nn.ffn(h, _sub(p, "ffn")), p["ln2.gamma"], p["ln2.beta"])
        return h

    def encode_graph(self, batch: Batch) -> torch.Tensor:
        s = self.store
        h = nn.linear(batch.features, s["graph.embed.weight"], s["graph.embed.bias"])
        for i in range(self.config.graph_layers):
            h = self._block(f"graph.{i}", h)
        return h

    def positional_encoding(self, patch_coords: torch.Tensor) -> torch.Tensor:
        s = self.store
        hid = torch.relu(nn.linear(patch_coords, s["image.pos.fc1.weight"], s["image.pos.fc1.bias"]))
        return nn.linear(hid, s["image.pos.fc2.weight"], s["image.pos.fc2.bias"])

    def encode_image(self, patches: torch.Tensor, patch_coords: torch.Tensor) -> torch.Tensor:
        s = self.store
        z = nn.linear(patches, s["image.patch.weight"], s["image.patch.bias"])
        z = z + self.positional_encoding(patch_coords)
        for i in range(self.config.image_layers):
            z = self._block(f"image.{i}", z)
        return z

    def fuse(self, h_graph: torch.Tensor, h_image: torch.Tensor | None):
        """Returns ``(h_graph_out, h_image_out, h_fused, g)``.

        With ``h_image=None`` (image branch disabled) the image side holds
        only its bottleneck tokens and contributes nothing to ``h_fused``.
        """
        c = self.config
        if c.disable_fusion:
            return h_graph, h_image, h_graph, h_graph.mean(dim=-2)
        B, n, d = h_graph.shape
        hg = h_graph
        hi = h_image if h_image is not None else h_graph.new_zeros(B, 0, d)
        N = hi.shape[1]
        for i in range(c.fusion_layers):
            p = self.store.group(f"fusion.{i}")
            bg = p["b_graph"].expand(B, -1, -1)
            bi = p["b_image"].expand(B, -1, -1)
            g_in = torch.cat([hg, bg], dim=1)
            i_in = torch.cat([hi, bi], dim=1)
            g_out = nn.multi_head_attention(g_in, i_in, i_in, _sub(p, "graph.attn"), c.heads)
            # bottleneck rows of the outputs are dropped: fresh tokens enter every layer
            hg_next = nn.layer_norm(hg + g_out[:, :n], p["graph.ln.gamma"], p["graph.ln.beta"])
            hg_next = hg_next + nn.ffn(hg_next, _sub(p, "graph.ffn"))
            if N:
                i_out = nn.multi_head_attention(i_in, g_in, g_in, _sub(p, "image.attn"), c.heads)
                hi = nn.layer_norm(hi + i_out[:, :N], p["image.ln.gamma"], p["image.ln.beta"])
                hi = hi + nn.ffn(hi, _sub(p, "image.ffn"))
            hg = hg_next
        if N:
            img_mean = hi.mean(dim=1, keepdim=True)
            h_fused = hg + c.fusion_weight * img_mean
            g = hg.mean(dim=1) + c.context_weight * img_mean[:, 0]
            return hg, hi, h_fused, g
        return hg, None, hg, hg.mean(dim=1)

    def encode(self, batch: Batch) -> EncoderOutput:
        h_graph = self.encode_graph(batch)
        h_image = None
        c = self.config
        if batch.patches is not None and not (c.disable_image or c.disable_fusion):
            h_image = self.encode_image(batch.patches, batch.patch_coords)
        hg, hi, fused, g = self.fuse(h_graph, h_image)
        return EncoderOutput(h_graph, h_image, hg, hi, fused, g)

    # -------------------------------------------------------------- decoder

    def start_state(self, batch: Batch, k: int) -> DecoderState:
        B, n, m = batch.size, batch.n, batch.m
        depot = batch.depot[:, None].expand(B, k)
        node_visited = torch.zeros(B, k, n, dtype=torch.bool)
        node_visited.scatter_(2, depot[..., None], True)
        cluster_visited = torch.zeros(B, k, m, dtype=torch.bool)
        cluster_visited.scatter_(2, batch.cluster.gather(1, batch.depot[:, None])[:, None, :].expand(B, k, 1), True)
        return DecoderState(1, [depot.clone()], node_visited, cluster_visited)

    def decode_step(
        self,
        state: DecoderState,
        batch: Batch,
        keys: torch.Tensor,
        h_fused: torch.Tensor,
        q_graph: torch.Tensor,
        mode: str = "greedy",
        forced: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
        trace: list | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Choose one node per rollout; returns ``(node [B,k], log_prob [B,k])``
        and advances ``state`` in place."""
        B, k = state.last.shape
        n, d = h_fused.shape[1], h_fused.shape[2]
        eligible = ~state.cluster_visited.gather(2, batch.cluster[:, None, :].expand(B, k, n))
        if not bool(eligible.any(dim=-1).all()):
            raise DecodingError(f"no eligible node at step {state.t}")
        h_last = h_fused.gather(1, state.last[..., None].expand(B, k, d))
        s = self.store
        q = nn.linear(h_last, s["decoder.q_last.weight"]) + q_graph[:, None, :]
        scores = torch.einsum("bkd,bnd->bkn", q, keys) / math.sqrt(d)
        logits = self.config.logit_clip * torch.tanh(scores)
        logits = logits.masked_fill(~eligible, float("-inf"))
        logp = torch.log_softmax(logits, dim=-1)
        if trace is not None:
            trace.append(StepTrace(logits.detach(), nn.softmax(logits.detach(), dim=-1), eligible))
        if forced is not None:
            node = forced
            if not bool(eligible.gather(2, node[..., None]).all()):
                raise DecodingError(f"forced node is not eligible at step {state.t}")
        elif mode == "greedy":
            node = logits.detach().argmax(dim=-1)
        elif mode == "sample":
            probs = logp.detach().exp().reshape(B * k, n)
            node = torch.multinomial(probs, 1, generator=generator).reshape(B, k)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        step_logp = logp.gather(2, node[..., None])[..., 0]
        state.tour.append(node)
        state.node_visited.scatter_(2, node[..., None], True)
        state.cluster_visited.scatter_(2, batch.cluster.gather(1, node)[..., None], True)
        state.t += 1
        return node, step_logp

    def start_nodes(self, batch: Batch, k: int) -> torch.Tensor:
        """The ``k`` nearest eligible nodes to each depot, ``[B, k]``."""
        B = batch.size
        dep_cluster = batch.cluster.gather(1, batch.depot[:, None])
        eligible = batch.cluster != dep_cluster
        d = batch.dist.gather(1, batch.depot[:, None, None].expand(B, 1, batch.n))[:, 0]
        d = d.masked_fill(~eligible, float("inf"))
        order = torch.argsort(d, dim=1, stable=True)
        return order[:, :k]

    def max_rollouts(self, batch: Batch) -> int:
        dep_cluster = batch.cluster.gather(1, batch.depot[:, None])
        return int((batch.cluster != dep_cluster).sum(dim=1).min())

    def decode(
        self,
        batch: Batch,
        enc: EncoderOutput,
        k: int,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
        actions: torch.Tensor | None = None,
        record: bool = False,
    ) -> Rollouts:
        """Multi-start decoding. ``actions`` ([B, k, m]) teacher-forces every step."""
        limit = self.max_rollouts(batch)
        if actions is not None:
            k = actions.shape[1]
        elif k > limit:
            log.warning("rollouts k=%d clamped to %d eligible start nodes", k, limit)
            k = limit
        s = self.store
        keys = nn.linear(enc.h_fused, s["decoder.key.weight"])
        q_graph = nn.linear(enc.g, s["decoder.q_graph.weight"])
        state = self.start_state(batch, k)
        if actions is not None and not torch.equal(actions[:, :, 0], state.last):
            raise DecodingError("teacher-forced tours must start at the depot")
        trace: list | None = [] if record else None
        step_lp = [torch.zeros(batch.size, k, dtype=self.dtype)]
        starts = self.start_nodes(batch, k) if actions is None else None
        for t in range(1, batch.m):
            if actions is not None:
                forced = actions[:, :, t]
            else:
                forced = starts if t == 1 else None
            _, lp = self.decode_step(state, batch, keys, enc.h_fused, q_graph, mode, forced, generator, trace)
            step_lp.append(lp)
        tours = torch.stack(state.tour, dim=2)
        step_log_probs = torch.stack(step_lp, dim=2)
        return Rollouts(tours, step_log_probs.sum(dim=2), tour_costs(batch.dist, tours), step_log_probs, trace or [])

    # ----------------------------------------------------------- front ends

    def rollout_batch(
        self,
        instances: Sequence[GtspInstance],
        k: int,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
        actions: torch.Tensor | None = None,
        record: bool = False,
    ) -> Rollouts:
        batch = self.prepare(instances)
        return self.decode(batch, self.encode(batch), k, mode, generator, actions, record)

    def rollout(
        self,
        instance: GtspInstance,
        k: int,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
    ) -> list[RolloutResult]:
        with torch.no_grad():
            r = self.rollout_batch([instance], k, mode, generator)
        out = []
        for j in range(r.tours.shape[1]):
            nodes = tuple(int(v) for v in r.tours[0, j])
            cost = float(r.cost[0, j])
            out.append(RolloutResult(Tour(nodes, cost), float(r.log_prob[0, j]), -cost))
        return out

    def greedy_solve(self, instance: GtspInstance) -> Tour:
        results = self.rollout(instance, rollout_count(instance.n), "greedy")
        best = min(range(len(results)), key=lambda j: (results[j].tour.cost, j))
        return results[best].tour

    def greedy_solve_many(self, instances: Sequence[GtspInstance], chunk: int = 64) -> list[Tour]:
        """Batched ``greedy_solve`` over instances grouped by shape."""
        out: list[Tour | None] = [None] * len(instances)
        with torch.no_grad():
            for idx in group_by_shape(instances, chunk):
                group = [instances[i] for i in idx]
                r = self.rollout_batch(group, rollout_count(group[0].n), "greedy")
                best = r.cost.argmin(dim=1)
                for row, i in enumerate(idx):
                    j = int(best[row])
                    out[i] = Tour(tuple(int(v) for v in r.tours[row, j]), float(r.cost[row, j]))
        return out  # type: ignore[return-value]


def _sub(group: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in group.items() if k.startswith(p)}


def tour_costs(dist: torch.Tensor, tours: torch.Tensor) -> torch.Tensor:
    """Closed-tour length for every ``[B, k, m]`` node sequence, float64."""
    B, k, m = tours.shape
    nxt = tours.roll(-1, dims=2)
    flat = dist.reshape(B, -1)
    idx = (tours * dist.shape[1] + nxt).reshape(B, k * m)
    return flat.gather(1, idx).reshape(B, k, m).sum(dim=2)


def group_by_shape(instances: Sequence[GtspInstance], chunk: int) -> list[list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i, x in enumerate(instances):
        groups.setdefault((x.n, x.m), []).append(i)
    out = []
    for idx in groups.values():
        out += [idx[s:s + chunk] for s in range(0, len(idx), chunk)]
    return out


def save_policy(path, policy: MMFLPolicy, epoch: int = 0, meta: dict | None = None) -> None:
    nn.save_checkpoint(path, policy.store, epoch, {"policy_config": policy.config.to_dict(), **(meta or {})})


def load_policy(path) -> tuple[MMFLPolicy, dict]:
    store, header = nn.load_checkpoint(path)
    config = PolicyConfig(**header["meta"]["policy_config"])
    return MMFLPolicy(config, store=store), header
