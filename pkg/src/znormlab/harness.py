"""Deterministic training loop, A/B comparison runner, and gradient checker.

One training step is: forward -> loss -> backward -> transform.apply ->
optimizer.step, with the overlap probe observing at its cadence. Identical
(config, seed, thread count) invocations produce byte-identical metrics.csv,
overlap.csv and gradstats.csv; wallclock timings therefore live in
timing.csv and the manifest, never in the deterministic files.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, data, nn, optim, overlap, rng, transforms
from .config import ExperimentConfig
from .tensor import Tensor

METRICS_HEADER = ["epoch", "step", "train_loss", "train_acc", "val_loss", "val_acc",
                  "global_grad_norm"]
TIMING_HEADER = ["epoch", "wallclock_s"]
CHECKPOINT_NAME = "checkpoint.znl"
GRADCHECK_TOLERANCE = 1e-6
GRADCHECK_FD_STEP = 1e-5


class TrainingAborted(RuntimeError):
    """Raised when a non-finite value stops a run; the run directory holds
    the last-good checkpoint and a manifest describing the failure."""

    def __init__(self, tensor_path: str, step: int, run_dir: str):
        super().__init__(
            f"non-finite value in {tensor_path!r} at step {step}; "
            f"last-good checkpoint in {run_dir}"
        )
        self.tensor_path = tensor_path
        self.step = step
        self.run_dir = run_dir


@dataclass
class MetricRow:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    global_grad_norm: float
    wallclock_s: float


@dataclass
class RunResult:
    run_dir: str
    rows: list[MetricRow]
    manifest: dict


def _fmt(x) -> str:
    # shortest round-trip decimal; repr() of a Python float guarantees it
    return repr(float(x))


def load_dataset(cfg: ExperimentConfig) -> data.DatasetSplit:
    if cfg.dataset in data.SYNTHETIC_TASKS:
        return data.synthetic_nonconvex(cfg.dataset, cfg.n, cfg.noise, cfg.seed)
    if cfg.dataset == "mnist":
        return data.load_mnist_idx(
            os.path.join(cfg.data_dir, "train-images-idx3-ubyte"),
            os.path.join(cfg.data_dir, "train-labels-idx1-ubyte"),
        )
    paths = sorted(
        os.path.join(cfg.data_dir, f)
        for f in os.listdir(cfg.data_dir)
        if f.endswith(".bin")
    )
    if not paths:
        raise FileNotFoundError(f"no .bin batch files under {cfg.data_dir}")
    return data.load_cifar10_bin(paths)


def _evaluate(spec, params, bn_state, split, batch_size):
    total_loss = 0.0
    correct = 0.0
    n = len(split)
    for start in range(0, n, batch_size):
        xb = split.images[start : start + batch_size]
        yb = split.labels[start : start + batch_size]
        logits, _ = nn.forward(spec, params, xb, bn_state, mode="eval")
        loss, _ = nn.softmax_cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += nn.accuracy(logits, yb) * len(yb)
    return total_loss / n, correct / n


def _first_nonfinite(loss: float, grads: dict[str, Tensor]) -> str | None:
    if not math.isfinite(loss):
        return "loss"
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            return path
    return None


def _checkpoint_tensors(params, bn_state):
    tensors = {path: p.value for path, p in params.items()}
    for name, state in bn_state.items():
        tensors[f"{name}.running_mean"] = state["mean"]
        tensors[f"{name}.running_var"] = state["var"]
    return tensors


def _write_manifest(run_dir, cfg, extra):
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "prng": rng.GENERATOR_ID,
        "precision": cfg.precision,
        "znl_threads": os.environ.get("ZNL_THREADS", ""),
        "version": __version__,
    }
    manifest.update(extra)
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def run(cfg: ExperimentConfig, out_dir: str | None = None) -> RunResult:
    """Execute one training run; returns the populated run directory.

    Emits metrics.csv (one row per epoch), overlap.csv and gradstats.csv at
    the probe cadence, timing.csv, a checkpoint, and manifest.json. On a
    non-finite loss or gradient the step is not applied; the current
    (last-good) parameters are checkpointed and TrainingAborted is raised.
    """
    cfg.validate()
    run_dir = out_dir or cfg.out_dir
    if not run_dir:
        raise ValueError("no output directory: set out_dir in the config or pass one")
    os.makedirs(run_dir, exist_ok=True)
    t0 = time.monotonic()
    transforms.reset_run_warnings()

    full = data.subset(load_dataset(cfg), cfg.train_limit)
    train, val = data.split_train_val(full)
    spec = nn.preset(cfg.arch, tuple(full.images.shape[1:]), full.num_classes)
    params, bn_state = nn.init_network(spec, cfg.seed, cfg.precision)
    opt = optim.OptimizerState(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    tspec = cfg.transform_spec()
    blocks = [(name, layer) for name, layer in nn._named(spec.layers)
              if isinstance(layer, nn.ResidualBlock)]

    rows: list[MetricRow] = []
    gradstat_rows: list[tuple] = []
    overlap_log = overlap.OverlapLog(os.path.join(run_dir, "overlap.csv"))
    abort_path: str | None = None
    global_step = 0
    try:
        for epoch in range(cfg.epochs):
            opt.lr = optim.lr_at_epoch(cfg.lr, epoch, cfg.lr_decay_epochs)
            aug_gen = rng.generator(cfg.seed, "aug", epoch) if cfg.augment == "flip-crop" else None
            loss_sum = 0.0
            acc_sum = 0.0
            norm_sum = 0.0
            seen = 0
            step_count = 0
            for xb, yb in data.batches(train, cfg.batch_size, cfg.seed, epoch):
                global_step += 1
                if aug_gen is not None:
                    xb = data.augment_flip_crop(xb, aug_gen)
                logits, cache = nn.forward(spec, params, xb, bn_state, mode="train")
                loss, dlogits = nn.softmax_cross_entropy(logits, yb)
                probing = cfg.probe_cadence > 0 and (global_step - 1) % cfg.probe_cadence == 0
                tap = nn.BlockTap() if probing else None
                grads = nn.backward(spec, params, cache, dlogits, tap)
                bad = _first_nonfinite(loss, grads)
                if bad is not None:
                    abort_path = bad
                    raise TrainingAborted(bad, global_step, run_dir)
                if probing:
                    gradstat_rows += [(s, "pre", p, m, sd, l2) for s, p, m, sd, l2
                                      in overlap.layer_grad_stats(grads, global_step)]
                tgrads = transforms.apply(tspec, grads)
                if probing:
                    gradstat_rows += [(s, "post", p, m, sd, l2) for s, p, m, sd, l2
                                      in overlap.layer_grad_stats(tgrads, global_step)]
                    for (name, layer), entry in zip(nn._named(spec.layers), cache.entries):
                        if isinstance(layer, nn.ResidualBlock):
                            upstream, _ = tap.blocks[name]
                            g_skip, g_branch = overlap.decompose(layer, entry, params, upstream)
                            overlap_log.append(
                                overlap.metrics(g_skip, g_branch, global_step, name)
                            )
                optim.step(opt, params, tgrads)
                loss_sum += loss * len(yb)
                acc_sum += nn.accuracy(logits, yb) * len(yb)
                norm_sum += transforms.global_norm(tgrads)
                seen += len(yb)
                step_count += 1
            val_loss, val_acc = _evaluate(spec, params, bn_state, val, cfg.batch_size)
            rows.append(MetricRow(
                epoch=epoch,
                step=global_step,
                train_loss=loss_sum / seen,
                train_acc=acc_sum / seen,
                val_loss=val_loss,
                val_acc=val_acc,
                global_grad_norm=norm_sum / step_count,
                wallclock_s=time.monotonic() - t0,
            ))
    finally:
        overlap_log.close()
        _write_metrics_csv(os.path.join(run_dir, "metrics.csv"), rows)
        _write_gradstats_csv(os.path.join(run_dir, "gradstats.csv"), gradstat_rows)
        _write_timing_csv(os.path.join(run_dir, "timing.csv"), rows)
        nn.save_checkpoint(
            os.path.join(run_dir, CHECKPOINT_NAME),
            _checkpoint_tensors(params, bn_state),
            cfg.precision,
        )
        manifest = _write_manifest(run_dir, cfg, {
            "standardization": full.standardization,
            "n_train": len(train),
            "n_val": len(val),
            "num_classes": full.num_classes,
            "param_count": int(sum(p.value.size for p in params.values())),
            "steps": global_step,
            "aborted": abort_path,
            "duration_s": time.monotonic() - t0,
        })
    return RunResult(run_dir, rows, manifest)


def _write_metrics_csv(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, _fmt(r.train_loss), _fmt(r.train_acc),
                        _fmt(r.val_loss), _fmt(r.val_acc), _fmt(r.global_grad_norm)])


def _write_timing_csv(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TIMING_HEADER)
        for r in rows:
            w.writerow([r.epoch, f"{r.wallclock_s:.3f}"])


def _write_gradstats_csv(path, stat_rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(overlap.GRADSTATS_HEADER)
        for step, phase, p, mean, std, l2 in stat_rows:
            w.writerow([step, phase, p, _fmt(mean), _fmt(std), _fmt(l2)])


# ---------------------------------------------------------------------------
# A/B comparison


@dataclass
class CompareCell:
    transform: str
    seed: int
    status: str  # "ok" | "failed"
    final_val_acc: float = math.nan
    final_val_loss: float = math.nan
    final_train_acc: float = math.nan
    dispersion_pre: float = math.nan
    dispersion_post: float = math.nan
    run_dir: str = ""


@dataclass
class CompareResult:
    out_dir: str
    cells: list[CompareCell] = field(default_factory=list)


def layer_dispersion(gradstats_path) -> dict[str, float]:
    """Mean over logged steps of the across-layer std of per-tensor grad std.

    Returned per phase ("pre"/"post"). This is the desk-scale proxy for how
    evenly gradient scales sit across layers: z-scored gradients should pin
    every tensor's std near 1, collapsing the spread.
    """
    by_key: dict[tuple, list[float]] = {}
    with open(gradstats_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != overlap.GRADSTATS_HEADER:
            raise ValueError(f"unexpected gradstats.csv header: {header}")
        for row in reader:
            by_key.setdefault((row[0], row[1]), []).append(float(row[4]))
    out: dict[str, list[float]] = {"pre": [], "post": []}
    for (_, phase), stds in by_key.items():
        arr = np.asarray(stds)
        out[phase].append(float(arr.std()))
    return {phase: (float(np.mean(v)) if v else math.nan) for phase, v in out.items()}


def compare(cfg: ExperimentConfig, transform_names: list[str], seeds: list[int],
            out_dir: str) -> CompareResult:
    """Run the full transform x seed cross product and write the report.

    Each cell is an independent run() in its own subdirectory; an aborted
    run marks the cell failed and is excluded from the aggregates, but the
    report is still emitted.
    """
    if not transform_names or not seeds:
        raise ValueError("compare needs at least one transform and one seed")
    os.makedirs(out_dir, exist_ok=True)
    result = CompareResult(out_dir)
    for tname in transform_names:
        for seed in seeds:
            cell_cfg = cfg.replace(transform=tname, seed=seed, out_dir="")
            run_dir = os.path.join(out_dir, "runs", f"{tname}-seed{seed}")
            cell = CompareCell(tname, seed, "ok", run_dir=run_dir)
            try:
                res = run(cell_cfg, run_dir)
                if res.rows:
                    last = res.rows[-1]
                    cell.final_val_acc = last.val_acc
                    cell.final_val_loss = last.val_loss
                    cell.final_train_acc = last.train_acc
                disp = layer_dispersion(os.path.join(run_dir, "gradstats.csv"))
                cell.dispersion_pre = disp["pre"]
                cell.dispersion_post = disp["post"]
            except TrainingAborted:
                cell.status = "failed"
            result.cells.append(cell)
    _write_compare_report(result, transform_names)
    return result


def _agg(values: list[float]) -> tuple[float, float]:
    ok = [v for v in values if not math.isnan(v)]
    if not ok:
        return math.nan, math.nan
    arr = np.asarray(ok)
    return float(arr.mean()), float(arr.std())


def _write_compare_report(result: CompareResult, transform_names: list[str]) -> None:
    cells_path = os.path.join(result.out_dir, "cells.csv")
    with open(cells_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["transform", "seed", "status", "final_val_acc", "final_val_loss",
                    "final_train_acc", "dispersion_pre", "dispersion_post"])
        for c in result.cells:
            w.writerow([c.transform, c.seed, c.status, _fmt(c.final_val_acc),
                        _fmt(c.final_val_loss), _fmt(c.final_train_acc),
                        _fmt(c.dispersion_pre), _fmt(c.dispersion_post)])

    report_rows = []
    for tname in transform_names:
        cells = [c for c in result.cells if c.transform == tname]
        ok = [c for c in cells if c.status == "ok"]
        acc_m, acc_s = _agg([c.final_val_acc for c in ok])
        loss_m, loss_s = _agg([c.final_val_loss for c in ok])
        pre_m, _ = _agg([c.dispersion_pre for c in ok])
        post_m, _ = _agg([c.dispersion_post for c in ok])
        report_rows.append([tname, len(cells), len(cells) - len(ok),
                            acc_m, acc_s, loss_m, loss_s, pre_m, post_m])
    with open(os.path.join(result.out_dir, "report.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["transform", "runs", "failed", "val_acc_mean", "val_acc_std",
                    "val_loss_mean", "val_loss_std", "dispersion_pre_mean",
                    "dispersion_post_mean"])
        for row in report_rows:
            w.writerow(row[:3] + [_fmt(v) for v in row[3:]])

    lines = ["# Transform comparison", "",
             "| transform | runs | failed | val acc | val loss | grad-std dispersion pre | post |",
             "|---|---|---|---|---|---|---|"]
    for tname, n_runs, n_failed, am, asd, lm, lsd, pre, post in report_rows:
        lines.append(
            f"| {tname} | {n_runs} | {n_failed} | {am:.4f} +- {asd:.4f} "
            f"| {lm:.4f} +- {lsd:.4f} | {pre:.6g} | {post:.6g} |"
        )
    lines += ["", "## Cells", "",
              "| transform | seed | status | val acc | val loss | disp pre | disp post |",
              "|---|---|---|---|---|---|---|"]
    for c in result.cells:
        lines.append(
            f"| {c.transform} | {c.seed} | {c.status} | {c.final_val_acc:.4f} "
            f"| {c.final_val_loss:.4f} | {c.dispersion_pre:.6g} | {c.dispersion_post:.6g} |"
        )
    with open(os.path.join(result.out_dir, "report.md"), "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    preset: str
    max_rel_err: dict[str, float]
    overlap_max_abs_err: float
    runtime_s: float

    @property
    def passed(self) -> bool:
        worst = max(self.max_rel_err.values(), default=0.0)
        return worst <= GRADCHECK_TOLERANCE and self.overlap_max_abs_err <= GRADCHECK_TOLERANCE

    def summary(self) -> str:
        lines = [f"gradcheck {self.preset}: {'PASS' if self.passed else 'FAIL'} "
                 f"({self.runtime_s:.1f}s)"]
        for kind in sorted(self.max_rel_err):
            lines.append(f"  {kind:>12}: max rel err {self.max_rel_err[kind]:.3e}")
        lines.append(f"  {'overlap':>12}: max abs err {self.overlap_max_abs_err:.3e}")
        return "\n".join(lines)


def _param_kind(path: str) -> str:
    parts = path.split(".")
    layer = parts[-2]
    if layer == "skip":
        return "projection"
    return layer.rstrip("0123456789")


def gradcheck(preset_name: str, seed: int = 0, batch_size: int | None = None) -> GradcheckReport:
    """Check every parameter coordinate against central finite differences.

    Runs the preset's verification geometry at 64-bit with h=1e-5. The
    reported error is |analytic - fd| / max(1, |analytic|, |fd|) so tiny
    gradients are judged on absolute error. Also verifies the residual
    decomposition identity g_skip + g_branch == dL/dx on every block.
    """
    t0 = time.monotonic()
    spec = nn.verification_preset(preset_name)
    params, bn_state = nn.init_network(spec, seed, "f64")
    classes = spec.output_shape()[0]
    n = batch_size or (8 if len(spec.input_shape) == 1 or spec.input_shape[1] == 1 else 4)
    gen = rng.generator(seed, "gradcheck")
    batch = np.array(
        [gen.uniform(-1, 1) for _ in range(n * int(np.prod(spec.input_shape)))],
        dtype=np.float64,
    ).reshape(n, *spec.input_shape)
    labels = np.array([gen.randint_below(classes) for _ in range(n)], dtype=np.int64)

    def loss_at() -> float:
        state = {k: {kk: vv.copy() for kk, vv in v.items()} for k, v in bn_state.items()}
        logits, _ = nn.forward(spec, params, batch, state, mode="train")
        loss, _ = nn.softmax_cross_entropy(logits, labels)
        return loss

    state = {k: {kk: vv.copy() for kk, vv in v.items()} for k, v in bn_state.items()}
    logits, cache = nn.forward(spec, params, batch, state, mode="train")
    _, dlogits = nn.softmax_cross_entropy(logits, labels)
    tap = nn.BlockTap()
    analytic = {p: g.copy() for p, g in nn.backward(spec, params, cache, dlogits, tap).items()}

    overlap_err = 0.0
    for (name, layer), entry in zip(nn._named(spec.layers), cache.entries):
        if isinstance(layer, nn.ResidualBlock):
            upstream, input_grad = tap.blocks[name]
            g_skip, g_branch = overlap.decompose(layer, entry, params, upstream)
            overlap_err = max(overlap_err, float(np.max(np.abs(g_skip + g_branch - input_grad))))

    h = GRADCHECK_FD_STEP
    max_err: dict[str, float] = {}
    for path, p in params.items():
        kind = _param_kind(path)
        flat = p.value.reshape(-1)
        a_flat = analytic[path].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at()
            flat[i] = orig - h
            lm = loss_at()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            a = a_flat[i]
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if err > max_err.get(kind, 0.0):
                max_err[kind] = err
    return GradcheckReport(preset_name, max_err, overlap_err, time.monotonic() - t0)
