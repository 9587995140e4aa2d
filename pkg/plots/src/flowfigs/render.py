"""Render run artifacts (CSV files) into figures.

Five figure kinds, each tied to a documented CSV schema:

- ``scatter``      sample clouds           (sample_id, x_1, x_2, ...)
- ``kde``          density heatmap         (same samples schema)
- ``loss_curves``  training curves         (iteration, nll, transport, hjb,
                                            supervised, total, lambda, beta, lr)
- ``kl_bound``     measured divergence vs its decay bound
                                           (t, M2, L1_moment, KL_est, KL_bound)
- ``moments``      second-moment tracks, one curve per input file
                                           (same metrics schema)

Inputs are read-only; a schema violation exits nonzero naming the missing
column. Figures are regenerated artifacts and are only schema-checked, never
pixel-compared.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "SchemaError", "render", "run", "main"]

KINDS = ("scatter", "kde", "loss_curves", "kl_bound", "moments")

REQUIRED_COLUMNS = {
    "scatter": ("sample_id", "x_1", "x_2"),
    "kde": ("sample_id", "x_1", "x_2"),
    "loss_curves": ("iteration", "total"),
    "kl_bound": ("t", "KL_est", "KL_bound"),
    "moments": ("t", "M2"),
}


class SchemaError(Exception):
    """Input CSV does not match the expected schema; names the column."""


@dataclass
class FigureSpec:
    kind: str
    inputs: list[str]
    output: str
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    xlim: tuple[float, float] | None = None
    ylim: tuple[float, float] | None = None
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; known: {', '.join(KINDS)}")
        if not self.inputs:
            raise SchemaError("at least one input CSV is required")


def _read_csv(path: str) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"input file not found: {path}")
    with open(p) as fh:
        header = fh.readline().strip()
        if not header:
            raise SchemaError(f"empty input: {path}")
        columns = header.split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if not rows:
        raise SchemaError(f"no data rows in {path}")
    data = np.array([[float(v) for v in row] for row in rows])
    return {name: data[:, i] for i, name in enumerate(columns)}


def _check_schema(kind: str, table: dict, path: str) -> None:
    for column in REQUIRED_COLUMNS[kind]:
        if column not in table:
            raise SchemaError(f"{path}: missing required column {column!r} "
                              f"for figure kind {kind!r}")


def _style_axes(ax, spec: FigureSpec) -> None:
    if spec.title:
        ax.set_title(spec.title)
    if spec.xlabel:
        ax.set_xlabel(spec.xlabel)
    if spec.ylabel:
        ax.set_ylabel(spec.ylabel)
    if spec.xlim:
        ax.set_xlim(*spec.xlim)
    if spec.ylim:
        ax.set_ylim(*spec.ylim)


def _label(spec: FigureSpec, idx: int) -> str:
    if idx < len(spec.labels):
        return spec.labels[idx]
    return Path(spec.inputs[idx]).stem


def _render_scatter(spec: FigureSpec, ax) -> None:
    for idx, path in enumerate(spec.inputs):
        table = _read_csv(path)
        _check_schema("scatter", table, path)
        ax.scatter(table["x_1"], table["x_2"], s=6, alpha=0.6,
                   label=_label(spec, idx))
    ax.set_aspect("equal", adjustable="datalim")
    if len(spec.inputs) > 1:
        ax.legend(frameon=False)


def _render_kde(spec: FigureSpec, ax) -> None:
    table = _read_csv(spec.inputs[0])
    _check_schema("kde", table, spec.inputs[0])
    pts = np.column_stack([table["x_1"], table["x_2"]])
    n = pts.shape[0]
    spread = max(pts.std(axis=0).mean(), 1e-6)
    bandwidth = 1.06 * spread * n ** (-1 / 5)
    lo = pts.min(axis=0) - 3 * bandwidth
    hi = pts.max(axis=0) + 3 * bandwidth
    gx = np.linspace(lo[0], hi[0], 160)
    gy = np.linspace(lo[1], hi[1], 160)
    mx, my = np.meshgrid(gx, gy)
    grid = np.column_stack([mx.ravel(), my.ravel()])
    dens = np.zeros(grid.shape[0])
    for chunk in np.array_split(np.arange(n), max(1, n // 512)):
        diff = grid[:, None, :] - pts[chunk][None, :, :]
        dens += np.exp(-np.sum(diff ** 2, axis=2) / (2 * bandwidth ** 2)).sum(axis=1)
    dens /= n * 2 * np.pi * bandwidth ** 2
    ax.imshow(dens.reshape(mx.shape), origin="lower",
              extent=(lo[0], hi[0], lo[1], hi[1]), cmap="viridis", aspect="auto")


def _render_loss_curves(spec: FigureSpec, ax) -> None:
    for idx, path in enumerate(spec.inputs):
        table = _read_csv(path)
        _check_schema("loss_curves", table, path)
        stem = _label(spec, idx)
        ax.plot(table["iteration"], table["total"], label=f"{stem} total")
        for part in ("nll", "transport", "hjb"):
            if part in table and len(spec.inputs) == 1:
                ax.plot(table["iteration"], table[part], alpha=0.6, label=part)
    ax.legend(frameon=False)


def _render_kl_bound(spec: FigureSpec, ax) -> None:
    for idx, path in enumerate(spec.inputs):
        table = _read_csv(path)
        _check_schema("kl_bound", table, path)
        stem = _label(spec, idx)
        ax.plot(table["t"], table["KL_est"], label=f"{stem} measured")
        ax.plot(table["t"], table["KL_bound"], "--", label=f"{stem} bound")
    ax.set_ylim(bottom=0)
    ax.legend(frameon=False)


def _render_moments(spec: FigureSpec, ax) -> None:
    for idx, path in enumerate(spec.inputs):
        table = _read_csv(path)
        _check_schema("moments", table, path)
        ax.plot(table["t"], table["M2"], label=_label(spec, idx))
        if "L1_moment" in table:
            ax.plot(table["t"], table["L1_moment"], ":", alpha=0.7,
                    label=f"{_label(spec, idx)} L1")
    ax.legend(frameon=False)


_RENDERERS = {
    "scatter": _render_scatter,
    "kde": _render_kde,
    "loss_curves": _render_loss_curves,
    "kl_bound": _render_kl_bound,
    "moments": _render_moments,
}


def render(spec: FigureSpec) -> str:
    """Draw one figure and write it; returns the output path."""
    fig, ax = plt.subplots(figsize=(5.2, 4.2), dpi=130)
    try:
        _RENDERERS[spec.kind](spec, ax)
        _style_axes(ax, spec)
        out = Path(spec.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(out)
    finally:
        plt.close(fig)
    return str(spec.output)


def _spec_from_args(args) -> FigureSpec:
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise SchemaError(f"spec file not found: {args.spec}")
        payload = json.loads(path.read_text())
        return FigureSpec(
            kind=payload["kind"], inputs=list(payload["inputs"]),
            output=payload["output"], title=payload.get("title", ""),
            xlabel=payload.get("xlabel", ""), ylabel=payload.get("ylabel", ""),
            xlim=tuple(payload["xlim"]) if payload.get("xlim") else None,
            ylim=tuple(payload["ylim"]) if payload.get("ylim") else None,
            labels=list(payload.get("labels", [])),
        )
    if not args.kind or not args.input or not args.out:
        raise SchemaError("need either --spec or all of --kind/--input/--out")
    return FigureSpec(kind=args.kind, inputs=args.input, output=args.out,
                      title=args.title, xlabel=args.xlabel, ylabel=args.ylabel,
                      labels=args.label or [])


def run(argv) -> int:
    parser = argparse.ArgumentParser(prog="flowfigs",
                                     description="render flow-run CSVs as figures")
    parser.add_argument("--spec", default=None, help="JSON figure spec")
    parser.add_argument("--kind", choices=KINDS, default=None)
    parser.add_argument("--input", action="append", default=None,
                        help="input CSV (repeatable)")
    parser.add_argument("--out", default=None, help="output image path")
    parser.add_argument("--label", action="append", default=None,
                        help="curve label (repeatable, pairs with --input)")
    parser.add_argument("--title", default="")
    parser.add_argument("--xlabel", default="")
    parser.add_argument("--ylabel", default="")
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    try:
        spec = _spec_from_args(args)
        out = render(spec)
    except SchemaError as err:
        print(f"schema error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 3
    print(f"wrote {out}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
