"""Accuracy-vs-nL2 line plots rendered straight to SVG.

The plot is a pure function of the scenario CSVs: same inputs, byte-identical
output. No clocks, no dict-order dependence, just sorted series and fixed
formatting.
"""

import os

from .scenarios import ScenarioError

_WIDTH, _HEIGHT = 640, 420
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 62, 160, 34, 46

# okabe-ito palette, colorblind-safe
_COLORS = (
    "#0072b2", "#d55e00", "#009e73", "#cc79a7",
    "#e69f00", "#56b4e9", "#f0e442", "#000000",
)


def read_scenario_csv(path):
    """Parse one plain scenario table back into row dicts."""
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise ScenarioError(f"{path} is empty")
    header = [h.strip() for h in lines[0].split(",")]
    if header[:2] == ["Source", "Target"]:
        raise ScenarioError("transfer tables have no nL2 axis to plot")
    want = ["Network", "epsilon", "top1_clean", "top1_adv", "nL2", "Linf"]
    if header[: len(want)] != want:
        raise ScenarioError(f"unrecognized scenario table header in {path}: {lines[0]!r}")
    rows = []
    for ln in lines[1:]:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) < len(want):
            raise ScenarioError(f"short row in {path}: {ln!r}")
        rows.append(
            {
                "network": parts[0],
                "epsilon": float(parts[1]),
                "top1_clean": float(parts[2]),
                "top1_adv": float(parts[3]),
                "nl2": float(parts[4]),
                "linf": float(parts[5]),
            }
        )
    return rows


def series_from_csvs(paths):
    """One series per (file stem, network): epsilon-ordered (nL2, acc) points."""
    series = {}
    for path in paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        for row in read_scenario_csv(path):
            label = f"{stem}:{row['network']}"
            series.setdefault(label, []).append(
                (row["epsilon"], row["nl2"], row["top1_adv"])
            )
    out = {}
    for label, pts in series.items():
        pts.sort()
        out[label] = [(nl2, acc) for _, nl2, acc in pts]
    return out


def _x_ticks(xmax):
    if xmax <= 0:
        return [0.0]
    step = xmax / 4.0
    return [i * step for i in range(5)]


def render_line_plot(series: dict, title: str = "",
                     xlabel: str = "mean nL2", ylabel: str = "top-1 accuracy") -> str:
    """Hand-rolled SVG: polyline + markers per series, legend at the right."""
    if not series:
        raise ScenarioError("nothing to plot")
    labels = sorted(series)
    xmax = max((x for pts in series.values() for x, _ in pts), default=0.0)
    if xmax <= 0.0:
        xmax = 1.0
    xmax *= 1.05
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def px(x):
        return _MARGIN_L + plot_w * (x / xmax)

    def py(y):
        return _MARGIN_T + plot_h * (1.0 - y)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_WIDTH / 2:.1f}" y="20" text-anchor="middle" '
            f'font-size="13">{_esc(title)}</text>'
        )
    # gridlines + axes
    for yt in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(yt)
        parts.append(
            f'<line x1="{px(0):.2f}" y1="{y:.2f}" x2="{px(xmax):.2f}" y2="{y:.2f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{px(0) - 8:.2f}" y="{y + 4:.2f}" text-anchor="end">{yt:g}</text>'
        )
    for xt in _x_ticks(xmax / 1.05):
        x = px(xt)
        parts.append(
            f'<line x1="{x:.2f}" y1="{py(0):.2f}" x2="{x:.2f}" y2="{py(0) + 5:.2f}" '
            f'stroke="#000000" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{py(0) + 18:.2f}" text-anchor="middle">{xt:.3f}</text>'
        )
    parts.append(
        f'<line x1="{px(0):.2f}" y1="{py(0):.2f}" x2="{px(xmax):.2f}" y2="{py(0):.2f}" '
        f'stroke="#000000" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{px(0):.2f}" y1="{py(0):.2f}" x2="{px(0):.2f}" y2="{py(1):.2f}" '
        f'stroke="#000000" stroke-width="1"/>'
    )
    parts.append(
        f'<text x="{(_MARGIN_L + plot_w / 2):.1f}" y="{_HEIGHT - 8}" '
        f'text-anchor="middle">{_esc(xlabel)}</text>'
    )
    parts.append(
        f'<text x="14" y="{(_MARGIN_T + plot_h / 2):.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(_MARGIN_T + plot_h / 2):.1f})">{_esc(ylabel)}</text>'
    )
    # series
    for i, label in enumerate(labels):
        color = _COLORS[i % len(_COLORS)]
        pts = series[label]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in pts:
            parts.append(
                f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{color}"/>'
            )
        ly = _MARGIN_T + 14 + 16 * i
        lx = _WIDTH - _MARGIN_R + 10
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{lx + 24}" y="{ly}">{_esc(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def plot_scenarios(csv_paths, out_path, title: str = "") -> None:
    """Figs. 3-6 style: one curve per (scenario file, network)."""
    svg = render_line_plot(series_from_csvs(sorted(csv_paths)), title=title)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(svg)
