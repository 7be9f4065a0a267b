"""Deterministic training loop, evaluation and seed sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .lam import MODES
from .model import Model, ModelConfig, build, save_checkpoint
from .tasks import EVAL_STREAM, TRAIN_STREAM, TaskConfig, accuracy, generate, task_from_dict, task_to_dict

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient for {name} at step {step}")
        self.name = name
        self.step = step


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.algorithm not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(cfg: OptimConfig, step: int, total_steps: int) -> float:
    """Learning rate for 1-based ``step``: linear warmup, then constant or cosine to 0."""
    w = cfg.warmup_steps
    if w and step <= w:
        return cfg.lr * step / w
    if cfg.schedule == "constant" or total_steps <= w:
        return cfg.lr
    progress = (step - w) / (total_steps - w)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: OptimConfig,
    step: int,
    lr: float | None = None,
) -> None:
    """One in-place Adam/AdamW update; ``step`` counts from 1."""
    if step < 1:
        raise ValueError(f"step counts from 1, got {step}")
    lr = cfg.lr if lr is None else lr
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name, step)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.algorithm == "adamw" and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ------------------------------------------------------------ run configuration


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig
    model: ModelConfig
    optim: OptimConfig = OptimConfig()
    steps: int = 1000
    batch_size: int = 64
    eval_every: int = 100
    eval_batches: int = 16
    eval_batch_size: int = 64
    eval_seed: int = 1234
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_batches < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes, eval_every and eval_batches must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.task.seq_len > self.model.t_max:
            raise ValueError(f"task seq_len {self.task.seq_len} exceeds model t_max {self.model.t_max}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["task"] = task_to_dict(self.task)
        out["model"] = asdict(self.model)
        out["optim"] = asdict(self.optim)
        out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        missing = {"task", "model"} - set(d)
        if missing:
            raise ValueError(f"run config is missing {sorted(missing)}")
        d = dict(d)
        d["task"] = task_from_dict(d["task"])
        d["model"] = ModelConfig.from_dict(d["model"])
        optim = d.get("optim", {})
        unknown = set(optim) - {f.name for f in fields(OptimConfig)}
        if unknown:
            raise ValueError(f"unknown optim config keys: {sorted(unknown)}")
        d["optim"] = OptimConfig(**optim)
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)

    def for_mode(self, mode: str) -> "RunConfig":
        return replace(self, model=replace(self.model, lambda_mode=mode))


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ------------------------------------------------------------ evaluation


def lambda_stats(lambdas: list[np.ndarray]) -> list[dict[str, list[float]]]:
    """Per layer, per level min / max / mean of dense λ over batch, tokens and heads."""
    out = []
    for lam in lambdas:
        flat = lam.reshape(-1, lam.shape[-1])
        out.append({
            "min": flat.min(axis=0).tolist(),
            "max": flat.max(axis=0).tolist(),
            "mean": flat.mean(axis=0).tolist(),
        })
    return out


def eval_batches(task: TaskConfig, eval_seed: int, n_batches: int, batch_size: int):
    for i in range(n_batches):
        yield generate(task, eval_seed, batch_size, start=i * batch_size, stream=EVAL_STREAM)


def evaluate_detail(
    model: Model, task: TaskConfig, eval_seed: int = 1234, n_batches: int = 16, batch_size: int = 64
) -> dict:
    if task.seq_len > model.cfg.t_max:
        raise ValueError(f"eval seq_len {task.seq_len} exceeds model t_max {model.cfg.t_max}")
    correct = total = 0
    loss_sum = 0.0
    lambdas = None
    for batch in eval_batches(task, eval_seed, n_batches, batch_size):
        capture = [] if lambdas is None else None
        logits = model.forward(batch.inputs, lambdas=capture)
        if capture is not None:
            lambdas = capture
        n = int(batch.mask.sum())
        correct += accuracy(logits, batch) * n
        total += n
        loss_sum += ad.cross_entropy(logits, batch.targets, batch.mask).item() * n
    return {"accuracy": correct / total, "loss": loss_sum / total, "lambda": lambda_stats(lambdas)}


def evaluate(model: Model, task: TaskConfig, eval_seed: int = 1234, n_batches: int = 16, batch_size: int = 64) -> float:
    return evaluate_detail(model, task, eval_seed, n_batches, batch_size)["accuracy"]


# ------------------------------------------------------------ training


@dataclass
class TrainResult:
    seed: int
    metrics: list[dict]
    model: Model
    collapsed: bool = False
    collapse_step: int | None = None
    final_accuracy: float = 0.0
    best_accuracy: float = 0.0


def train(run: RunConfig, seed: int | None = None, out_dir=None) -> TrainResult:
    """Train one seed of ``run``. Writes metrics/checkpoint under ``out_dir`` if given."""
    seed = run.seeds[0] if seed is None else seed
    model = build(replace(run.model, seed=seed))
    params = model.named_parameters()
    state = AdamState()
    metrics: list[dict] = []
    collapsed, collapse_step = False, None
    last_loss = float("nan")

    def record(step: int, train_loss: float) -> None:
        rec = {"type": "eval", "step": step, "train_loss": train_loss}
        rec.update(evaluate_detail(model, run.task, run.eval_seed, run.eval_batches, run.eval_batch_size))
        rec["eval_loss"] = rec.pop("loss")
        metrics.append(rec)
        log.info("seed %d step %d loss %.4f acc %s%%", seed, step, train_loss, f"{100 * rec['accuracy']:.1f}")

    for step in range(1, run.steps + 1):
        batch = generate(run.task, seed, run.batch_size, start=(step - 1) * run.batch_size, stream=TRAIN_STREAM)
        for p in params.values():
            p.grad = None
        try:
            with ad.Tape():
                loss = ad.cross_entropy(model.forward(batch.inputs), batch.targets, batch.mask)
                ad.backward(loss)
            last_loss = loss.item()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            adam_step(
                {k: p.data for k, p in params.items()}, grads, state, run.optim, step,
                lr_at(run.optim, step, run.steps),
            )
        except (ad.NonFiniteError, NonFiniteGradient) as exc:
            collapsed, collapse_step = True, step
            snapshot = []
            try:
                model.forward(batch.inputs[:1], lambdas=snapshot)
                snapshot = lambda_stats(snapshot)
            except ad.NonFiniteError:
                snapshot = None
            metrics.append({"type": "collapse", "step": step, "error": str(exc), "lambda": snapshot})
            log.warning("seed %d collapsed at step %d: %s", seed, step, exc)
            break
        if step % run.eval_every == 0 or step == run.steps:
            record(step, last_loss)

    accs = [m["accuracy"] for m in metrics if m["type"] == "eval"]
    final = run.task.chance if collapsed else accs[-1]
    result = TrainResult(seed, metrics, model, collapsed, collapse_step, final, max(accs, default=final))
    if out_dir is not None:
        write_run(run, result, out_dir)
    return result


def write_run(run: RunConfig, result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"metrics_seed{result.seed}.jsonl", "w") as fh:
        fh.write(dumps({"type": "config", "run": run.to_dict(), "seed": result.seed}) + "\n")
        for rec in result.metrics:
            fh.write(dumps(rec) + "\n")
    save_checkpoint(result.model, out / f"checkpoint_seed{result.seed}.bin", {"run": run.to_dict(), "seed": result.seed})


# ------------------------------------------------------------ sweeps


@dataclass
class SweepRow:
    mode: str
    task: str
    setting: str
    seed: int
    accuracy: float
    collapsed: bool = False
    best_accuracy: float | None = None


def setting_name(task: TaskConfig) -> str:
    if task.kind == "mqar":
        return f"T{task.seq_len}_k{task.num_pairs}"
    return f"T{task.seq_len}_n{task.num_targets}"


def _sweep_cell(args) -> SweepRow:
    run, mode, task, seed = args
    cell = replace(run.for_mode(mode), task=task)
    try:
        res = train(cell, seed)
        return SweepRow(mode, task.kind, setting_name(task), seed, res.final_accuracy, res.collapsed, res.best_accuracy)
    except Exception as exc:  # a failed run counts as collapsed, never dropped
        log.warning("run %s/%s/seed %d failed: %s", mode, setting_name(task), seed, exc)
        return SweepRow(mode, task.kind, setting_name(task), seed, task.chance, True)


def sweep(
    run: RunConfig,
    seeds=None,
    modes=MODES,
    settings: list[TaskConfig] | None = None,
    workers: int = 1,
    runner=_sweep_cell,
) -> list[SweepRow]:
    """Every (mode, setting, seed) cell, in that nesting order."""
    seeds = list(run.seeds if seeds is None else seeds)
    settings = settings or [run.task]
    jobs = [(run, m, t, s) for m in modes for t in settings for s in seeds]
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers) as pool:
            return pool.map(runner, jobs)
    return [runner(j) for j in jobs]


def summarize(rows: list[SweepRow]) -> list[dict]:
    """Per (mode, task, setting): mean, std (n-1 denominator, 0 for one seed)
    and peak of final accuracy, plus the best accuracy seen at any eval."""
    cells: dict[tuple[str, str, str], list[SweepRow]] = {}
    for r in rows:
        cells.setdefault((r.mode, r.task, r.setting), []).append(r)
    out = []
    for (mode, task, setting), cell in cells.items():
        a = np.asarray([r.accuracy for r in cell], dtype=np.float64)
        best = [r.accuracy if r.best_accuracy is None else r.best_accuracy for r in cell]
        out.append({
            "mode": mode, "task": task, "setting": setting, "n": len(a),
            "mean": float(a.mean()),
            "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
            "peak": float(a.max()),
            "best": float(max(best)),
            "collapsed": sum(r.collapsed for r in cell),
        })
    return out


def sweep_csv(rows: list[SweepRow]) -> str:
    """Per-seed rows followed by mean/std/peak/best rows (stat name in the seed column)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "task", "setting", "seed", "accuracy"])
    for r in rows:
        w.writerow([r.mode, r.task, r.setting, r.seed, repr(r.accuracy)])
    for s in summarize(rows):
        for stat in ("mean", "std", "peak", "best"):
            w.writerow([s["mode"], s["task"], s["setting"], stat, repr(s[stat])])
    return buf.getvalue()
