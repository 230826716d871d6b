"""Evaluation reports: Obj / Gap / Time per method and dataset."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

CSV_FIELDS = ("dataset", "method", "instance", "seed", "obj", "gap", "time")


def gap_percent(obj: float, best: float) -> float:
    """Optimality gap ``(obj - best) / best * 100``."""
    if best <= 0:
        raise ValueError(f"best objective must be positive, got {best}")
    return (obj - best) / best * 100.0


@dataclass
class MethodResult:
    """Costs of one method on one dataset, in instance order.

    ``seconds`` is wall clock for the whole dataset. ``inference_seconds``
    only applies to learned methods (greedy decoding without load/prepare).
    """

    method: str
    costs: list[float]
    seconds: float = 0.0
    inference_seconds: float | None = None

    @property
    def obj(self) -> float:
        return math.fsum(self.costs) / len(self.costs)


@dataclass
class EvalReport:
    dataset: str
    seeds: list[int]
    results: list[MethodResult] = field(default_factory=list)

    def add(self, result: MethodResult) -> None:
        if len(result.costs) != len(self.seeds):
            raise ValueError(f"{result.method}: {len(result.costs)} costs for {len(self.seeds)} instances")
        self.results.append(result)

    @property
    def best(self) -> float:
        return min(r.obj for r in self.results)

    def gap(self, method: str) -> float:
        return gap_percent(self[method].obj, self.best)

    def __getitem__(self, method: str) -> MethodResult:
        for r in self.results:
            if r.method == method:
                return r
        raise KeyError(method)

    def rows(self, include_time: bool = True) -> list[dict]:
        """Per-instance detail rows followed by one ``mean`` row per method.

        Instance rows measure the gap against the best cost on that
        instance; mean rows against the best mean Obj.
        """
        out = []
        for i, seed in enumerate(self.seeds):
            best_i = min(r.costs[i] for r in self.results)
            for r in self.results:
                out.append(dict(dataset=self.dataset, method=r.method, instance=i, seed=seed,
                                obj=r.costs[i], gap=gap_percent(r.costs[i], best_i), time=""))
        for r in self.results:
            out.append(dict(dataset=self.dataset, method=r.method, instance="mean", seed="",
                            obj=r.obj, gap=self.gap(r.method), time=r.seconds if include_time else ""))
        return out

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows(include_time):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def table(self, include_time: bool = True) -> str:
        """Aligned text table, one row per method."""
        head = ["Method", "Obj.", "Gap", "Time"]
        body = []
        for r in self.results:
            t = "-"
            if include_time:
                t = f"{r.seconds:.2f}s"
                if r.inference_seconds is not None:
                    t += f" (inference {r.inference_seconds:.2f}s)"
            body.append([r.method, f"{r.obj:.2f}", f"{self.gap(r.method):.2f}%", t])
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = [f"dataset: {self.dataset} ({len(self.seeds)} instances)"]
        for row in [head, *body]:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"


def combine_tables(reports: Sequence[EvalReport], include_time: bool = True) -> str:
    return "\n".join(r.table(include_time) for r in reports)
