"""λ extraction: token-level CSV, per-checkpoint averages and PPM heatmaps.

Token-level CSV columns are ``layer,head,level,position,active,lambda`` with
one row per (position, level), positions outer. ``head`` is an integer or
``avg`` for the mean over heads. Heatmaps are binary P6 images with level 0
on the top row and token position on the x axis; the data range is written
next to the image as ``<image>.range.txt``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fenwick import active_mask
from .model import Model

VIEWS = ("token_level", "averaged", "seed_comparison")
CSV_HEADER = ["layer", "head", "level", "position", "active", "lambda"]

WHITE = (255, 255, 255)
DARK = (8, 48, 107)
RED = (220, 20, 20)


@dataclass(frozen=True)
class HeatmapSpec:
    layer: int = 0
    head: int | str = "avg"
    view: str = "token_level"
    sample: int = 0

    def validate(self, model: Model) -> None:
        cfg = model.cfg
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}; expected one of {VIEWS}")
        if not 0 <= self.layer < cfg.n_layers:
            raise ValueError(f"layer {self.layer} outside [0, {cfg.n_layers})")
        if self.head != "avg" and not (isinstance(self.head, int) and 0 <= self.head < cfg.n_heads):
            raise ValueError(f"head {self.head!r} is neither 'avg' nor in [0, {cfg.n_heads})")


def model_lambdas(model: Model, tokens) -> list[np.ndarray]:
    """Dense λ per layer, each (B, T, H, L)."""
    tokens = np.atleast_2d(np.asarray(tokens))
    out: list[np.ndarray] = []
    model.forward(tokens, lambdas=out)
    return out


def lambda_rows(model: Model, tokens, spec: HeatmapSpec) -> list[dict]:
    spec.validate(model)
    tokens = np.atleast_2d(np.asarray(tokens))
    if not 0 <= spec.sample < len(tokens):
        raise ValueError(f"sample {spec.sample} outside batch of {len(tokens)}")
    lam = model_lambdas(model, tokens)[spec.layer][spec.sample]  # (T, H, L)
    grid = lam.mean(axis=1) if spec.head == "avg" else lam[:, spec.head, :]
    T, L = grid.shape
    mask = active_mask(T, L).astype(int)
    return [
        {"layer": spec.layer, "head": spec.head, "level": lvl, "position": t,
         "active": int(mask[t, lvl]), "lambda": float(grid[t, lvl])}
        for t in range(T) for lvl in range(L)
    ]


def write_rows(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r["layer"], r["head"], r["level"], r["position"], r["active"], repr(r["lambda"])])


def export_lambda_csv(model: Model, tokens, spec: HeatmapSpec, path) -> list[dict]:
    rows = lambda_rows(model, tokens, spec)
    write_rows(rows, path)
    return rows


def read_lambda_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["layer"], r["level"], r["position"], r["active"] = (
            int(r["layer"]), int(r["level"]), int(r["position"]), int(r["active"]))
        r["head"] = r["head"] if r["head"] == "avg" else int(r["head"])
        r["lambda"] = float(r["lambda"])
    return rows


def averaged_profile(model: Model, tokens) -> np.ndarray:
    """λ averaged over batch and tokens: (n_layers, H, L)."""
    return np.stack([lam.mean(axis=(0, 1)) for lam in model_lambdas(model, tokens)])


def render_heatmap(
    rows: list[dict],
    path,
    boundary: int | None = None,
    cell: int = 4,
    low: tuple[int, int, int] = WHITE,
    high: tuple[int, int, int] = DARK,
) -> tuple[float, float]:
    """Write a P6 image of λ over (level, position); returns the (min, max) legend.

    ``boundary`` paints the left pixel column of that position red (start of
    the copy-target region for selective copying).
    """
    if not rows:
        raise ValueError("no rows to render")
    T = max(r["position"] for r in rows) + 1
    L = max(r["level"] for r in rows) + 1
    grid = np.zeros((L, T))
    for r in rows:
        grid[r["level"], r["position"]] = r["lambda"]
    lo, hi = float(grid.min()), float(grid.max())
    frac = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    lo_c, hi_c = np.asarray(low, float), np.asarray(high, float)
    rgb = np.rint(lo_c + frac[..., None] * (hi_c - lo_c)).astype(np.uint8)
    img = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    if boundary is not None and 0 <= boundary < T:
        img[:, boundary * cell] = RED
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    Path(str(path) + ".range.txt").write_text(f"min={lo!r} max={hi!r}\n")
    return lo, hi


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def seed_comparison(models: list[tuple[int, Model]], tokens, path) -> list[dict]:
    """Side-by-side mean-λ profiles, one ``seed_<s>`` column per checkpoint."""
    if len(models) < 2:
        raise ValueError("seed comparison needs at least two checkpoints")
    ref = {k: v for k, v in vars(models[0][1].cfg).items() if k != "seed"}
    for seed, m in models[1:]:
        cfg = {k: v for k, v in vars(m.cfg).items() if k != "seed"}
        if cfg != ref:
            diff = sorted(k for k in cfg if cfg[k] != ref.get(k))
            raise ValueError(f"checkpoint for seed {seed} differs in config fields {diff}")
    profiles = [(seed, averaged_profile(m, tokens)) for seed, m in models]
    n_layers, H, L = profiles[0][1].shape
    rows = []
    for layer in range(n_layers):
        for head in range(H):
            for lvl in range(L):
                row = {"layer": layer, "head": head, "level": lvl}
                for seed, prof in profiles:
                    row[f"seed_{seed}"] = float(prof[layer, head, lvl])
                rows.append(row)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["layer", "head", "level"] + [f"seed_{s}" for s, _ in profiles]
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if not c.startswith("seed_") else repr(r[c]) for c in cols])
    return rows
