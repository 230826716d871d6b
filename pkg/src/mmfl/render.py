"""Static SVG rendering of an instance and a tour."""

from __future__ import annotations

from pathlib import Path

from .instance import GtspInstance, InfeasibleTourError, Tour, validate_tour

CANVAS = 800
MARGIN = 20

# 12 qualitative colours; cluster c uses PALETTE[c % 12]
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#ad494a",
)


def _xy(x: float, y: float) -> tuple[str, str]:
    # unit square to canvas, y axis pointing up
    span = CANVAS - 2 * MARGIN
    return f"{MARGIN + x * span:.2f}", f"{CANVAS - MARGIN - y * span:.2f}"


def render_svg(instance: GtspInstance, tour: Tour | None = None) -> str:
    """SVG text for ``instance``, with ``tour`` drawn as a closed polyline.

    Raises ``InfeasibleTourError`` rather than drawing an infeasible tour.
    """
    nodes: tuple[int, ...] = ()
    if tour is not None:
        nodes = tuple(int(v) for v in (tour.nodes if isinstance(tour, Tour) else tour))
        report = validate_tour(instance, nodes)
        if not report.ok:
            raise InfeasibleTourError(report.violations)
    selected = set(nodes)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">',
        f'<rect x="0" y="0" width="{CANVAS}" height="{CANVAS}" fill="#ffffff"/>',
    ]
    if nodes:
        pts = " ".join(",".join(_xy(*instance.coords[v])) for v in nodes + nodes[:1])
        out.append(f'<polyline class="tour" points="{pts}" fill="none" stroke="#222222" stroke-width="1.5"/>')
    for v in range(instance.n):
        cx, cy = _xy(*instance.coords[v])
        color = PALETTE[int(instance.cluster_of[v]) % len(PALETTE)]
        c = int(instance.cluster_of[v])
        if v in selected:
            out.append(f'<circle class="node selected" data-cluster="{c}" cx="{cx}" cy="{cy}" r="6" fill="{color}" stroke="#000000" stroke-width="2"/>')
        else:
            out.append(f'<circle class="node" data-cluster="{c}" cx="{cx}" cy="{cy}" r="3.5" fill="{color}" fill-opacity="0.6"/>')
    dx, dy = (float(s) for s in _xy(*instance.coords[instance.depot]))
    out.append(f'<rect class="depot" x="{dx - 9:.2f}" y="{dy - 9:.2f}" width="18" height="18" fill="none" stroke="#000000" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(instance: GtspInstance, tour: Tour | None, path) -> None:
    Path(path).write_text(render_svg(instance, tour))
