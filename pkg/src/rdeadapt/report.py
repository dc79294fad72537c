"""Artifact writers: 17-digit JSON and CSV, minimal standalone SVG plots."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np


def fmt(x):
    """A float with 17 significant digits; non-finite values become JSON null."""
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def to_json(obj, indent=2, _level=0):
    """JSON text with every float written to 17 significant digits.

    The standard encoder prints the shortest round-trip form, which is not a
    fixed width; artifacts promise 17 digits, hence this small serializer.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_key(k)}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + to_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist(), indent, _level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return _key(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _key(s):
    import json
    return json.dumps(str(s))


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def partition_csv(partition):
    lines = ["t_start,t_end,degree,depth,local_error,weight,contribution,cost"]
    for iv in partition.intervals:
        lines.append(",".join([fmt(iv.t_start), fmt(iv.t_end), str(iv.degree), str(iv.depth),
                               _nan(iv.local_error), _nan(iv.weight), _nan(iv.contribution), _nan(iv.cost)]))
    return "\n".join(lines) + "\n"


def _nan(x):
    return "" if not math.isfinite(float(x)) else fmt(x)


def solution_csv(times, states):
    states = np.asarray(states)
    header = ["t"] + [f"y{i + 1}" for i in range(states.shape[1])]
    lines = [",".join(header)]
    for t, row in zip(times, states):
        lines.append(",".join(fmt(v) for v in (t, *row)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_plot(series, title="", xlabel="t", ylabel="", log_y=False, steps=False, width=640, height=360):
    """A line (or step) plot of ``series = [(label, x, y), ...]`` as SVG text."""
    ml, mr, mt, mb = 60, 110, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    ys = np.concatenate([np.asarray(s[2], float) for s in series])
    if log_y:
        ys = np.log10(ys[ys > 0]) if np.any(ys > 0) else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{ml + pw / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2})">'
           f'{escape(ylabel)}</text>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        ylab = f"1e{yv:.1f}" if log_y else f"{yv:.3g}"
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{ml - 4}" y="{py(yv) + 4:.1f}" text-anchor="end">{ylab}</text>')
    for j, (label, x, y) in enumerate(series):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        step = steps and len(x) == len(y) + 1
        left, right = (x[:-1], x[1:]) if step else (x, x)
        if log_y:
            keep = y > 0
            left, right, y = left[keep], right[keep], np.log10(y[keep])
        if step:
            pts = []
            for a, b, v in zip(left, right, y):
                pts += [(px(a), py(v)), (px(b), py(v))]
        else:
            pts = [(px(a), py(b)) for a, b in zip(left, y)]
        color = _COLORS[j % len(_COLORS)]
        d = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{d}"/>')
        out.append(f'<text x="{ml + pw + 8}" y="{mt + 14 + 14 * j}" fill="{color}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def thin(times, states, max_points=4000):
    """Every k-th point (plus the last) so that plots stay small."""
    n = len(times)
    if n <= max_points:
        return np.asarray(times), np.asarray(states)
    idx = np.unique(np.concatenate([np.arange(0, n, int(math.ceil(n / max_points))), [n - 1]]))
    return np.asarray(times)[idx], np.asarray(states)[idx]
