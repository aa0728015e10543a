"""Deterministic SVG emission for metric-vs-prefix-level curves.

The SVG is assembled from string templates with repr-formatted floats and no
timestamps or generator metadata, so identical CSV input produces identical
bytes. Only the handful of drawing features needed here are implemented.
"""

from __future__ import annotations

from pathlib import Path

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 30, 30, 60
_COLORS = ("#1f6f8b", "#c14953", "#3a7d44", "#8d6a9f", "#b8860b")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """Header + data rows; malformed rows are reported with a line number."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty CSV")
    header = lines[0].split(",")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}:{ln}: expected {len(header)} fields, got {len(parts)}")
        rows.append(parts)
    return header, rows


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def plot_emit(csv_path, out_path, x_col: str = "level",
              y_cols: tuple[str, ...] = ("mse", "cosine")) -> None:
    """Render metric curves (mean over rows sharing an x value) to SVG."""
    header, rows = read_csv(csv_path)
    for col in (x_col, *y_cols):
        if col not in header:
            raise ValueError(f"missing column: {col}")
    xi = header.index(x_col)
    series: dict[str, dict[float, list[float]]] = {c: {} for c in y_cols}
    for parts in rows:
        try:
            x = float(parts[xi])
        except ValueError:
            continue  # summary rows carry a non-numeric level
        for c in y_cols:
            v = float(parts[header.index(c)])
            if v == v:  # skip NaN
                series[c].setdefault(x, []).append(v)

    xs = sorted({x for c in y_cols for x in series[c]})
    if not xs:
        raise ValueError("no plottable rows in CSV")
    all_vals = [sum(vs) / len(vs) for c in y_cols for vs in series[c].values()]
    ymin, ymax = min(all_vals), max(all_vals)
    if ymax == ymin:
        ymax = ymin + 1.0
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad

    def sx(x: float) -> float:
        return _ML + (x - xs[0]) / max(xs[-1] - xs[0], 1e-12) * (_W - _ML - _MR)

    def sy(y: float) -> float:
        return _H - _MB - (y - ymin) / (ymax - ymin) * (_H - _MT - _MB)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
             f'viewBox="0 0 {_W} {_H}">',
             f'<rect width="{_W}" height="{_H}" fill="#ffffff"/>',
             f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
             'stroke="#333333" stroke-width="1"/>',
             f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" '
             'stroke="#333333" stroke-width="1"/>']
    for x in xs:
        px = _fmt(sx(x))
        parts.append(f'<line x1="{px}" y1="{_H - _MB}" x2="{px}" y2="{_H - _MB + 5}" '
                     'stroke="#333333" stroke-width="1"/>')
        parts.append(f'<text x="{px}" y="{_H - _MB + 20}" font-size="12" '
                     f'text-anchor="middle" fill="#333333">{x:g}</text>')
    for i in range(5):
        yv = ymin + (ymax - ymin) * i / 4
        py = _fmt(sy(yv))
        parts.append(f'<text x="{_ML - 8}" y="{py}" font-size="12" '
                     f'text-anchor="end" fill="#333333">{yv:.3g}</text>')
    for ci, c in enumerate(y_cols):
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(sum(series[c][x]) / len(series[c][x])))}"
                       for x in xs if x in series[c])
        color = _COLORS[ci % len(_COLORS)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR - 5}" y="{_MT + 16 * (ci + 1)}" font-size="13" '
                     f'text-anchor="end" fill="{color}">{c}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 15}" font-size="13" '
                 f'text-anchor="middle" fill="#333333">{x_col}</text>')
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n")
