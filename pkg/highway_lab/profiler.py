"""Per-step cost measurement: structural gradient bytes plus wall-clock time.

Bytes come from the tape's accounting and are deterministic for a given
structure. Step time is the median of ``k`` timed steps after ``warmup``
untimed ones, so it is only comparable across runs on the same machine.
"""

from __future__ import annotations

import itertools
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

from pydantic import BaseModel, Field
from rich.console import Console
from rich.table import Table

from highway_lab.accountant import materialized_count
from highway_lab.config import BackboneConfig, HeadConfig, MethodConfig, TrainConfig
from highway_lab.data import SyntheticDataset
from highway_lab.model import build_model
from highway_lab.optim import AdamW, AdamWHyper
from highway_lab.tape import backward, tape_stats
from highway_lab.train import batches, train

log = logging.getLogger(__name__)

MIN_TIMED_STEPS = 5
COMPARE_COLUMNS = (
    "method", "trainable_params", "delta_params_pct", "grad_bytes", "delta_mem_pct",
    "step_time_ms", "delta_time_pct", "n_backbone_grad_nodes",
)
ABLATE_COLUMNS = (
    "trainable_reduction", "train_fpn_norm", "trainable_params", "delta_params",
    "final_loss", "final_pixel_acc",
)

# Published Swin-B training-memory deltas vs full fine-tuning, percent.
REFERENCE_MEM_DELTA_PCT = {
    "full": 0.0, "fixed": -58.17, "bitfit": -19.95, "norm": -24.79, "partial1": -57.21,
    "adapter": -26.40, "lora": -29.81, "adaptformer": -22.71, "e3va": -55.23,
}
# Published training-time fractions of full fine-tuning, percent.
REFERENCE_TIME_PCT = {
    "full": 100.0, "fixed": 64.20, "bitfit": 87.65, "norm": 85.19, "partial1": 66.67,
    "adapter": 97.53, "lora": 100.00, "adaptformer": 97.53, "e3va": 85.19,
}


class StepProfile(BaseModel):
    method: str
    trainable_params: int
    grad_bytes: int
    act_saved_bytes: int
    n_nodes: int
    n_grad_nodes: int
    n_backbone_grad_nodes: int
    step_time_ms: float
    step_times_ms: list[float] = Field(default_factory=list)


class ComparisonRow(BaseModel):
    method: str
    trainable_params: int
    delta_params_pct: float
    grad_bytes: int
    delta_mem_pct: float
    step_time_ms: float
    delta_time_pct: float
    n_backbone_grad_nodes: int


class ComparisonReport(BaseModel):
    backbone: str
    seed: int
    k: int
    rows: list[ComparisonRow] = Field(default_factory=list)

    def row(self, method: str) -> ComparisonRow:
        return next(r for r in self.rows if r.method == method)


class AblationRow(BaseModel):
    trainable_reduction: bool
    train_fpn_norm: bool
    trainable_params: int
    delta_params: int
    final_loss: float
    final_pixel_acc: float


class AblationReport(BaseModel):
    backbone: str
    alpha: int
    seed: int
    steps: int
    rows: list[AblationRow] = Field(default_factory=list)


def profile_step(cfg: BackboneConfig, method: MethodConfig, data: SyntheticDataset, *, k: int = 20,
                 warmup: int = 2, seed: int = 0, batch: int = 4, head: HeadConfig | None = None) -> StepProfile:
    """Time ``k`` full training steps (forward, backward, AdamW) and record tape statistics."""
    if k < MIN_TIMED_STEPS:
        raise ValueError(f"k must be at least {MIN_TIMED_STEPS}, got {k}")
    if warmup < 2:
        raise ValueError(f"warmup must be at least 2 untimed steps, got {warmup}")
    model = build_model(cfg, method, head or HeadConfig(num_classes=data.num_classes), seed)
    opt = AdamW(model.registry.trainable(), AdamWHyper())
    stats = None
    times = []
    for i, index in enumerate(batches(len(data), min(batch, len(data)), warmup + k, seed)):
        images, labels = data.batch(index)
        start = time.perf_counter()
        tape, loss, _ = model.forward_loss(images, labels)
        grads = backward(tape, loss)
        opt.step(grads)
        elapsed = time.perf_counter() - start
        if stats is None:
            stats = tape_stats(tape)
        if i >= warmup:
            times.append(elapsed * 1000.0)
    log.debug("profiled %s: %s", method.label, stats)
    return StepProfile(
        method=method.label,
        trainable_params=materialized_count(model).trainable,
        grad_bytes=stats.grad_bytes_total,
        act_saved_bytes=stats.activation_bytes_total,
        n_nodes=stats.n_nodes,
        n_grad_nodes=stats.n_grad_nodes,
        n_backbone_grad_nodes=stats.n_backbone_grad_nodes,
        step_time_ms=statistics.median(times),
        step_times_ms=times,
    )


def _pct(value: float, reference: float) -> float:
    return 100.0 * (value - reference) / reference if reference else 0.0


def _profile_job(job: tuple) -> StepProfile:
    cfg, method, data, k, warmup, seed, batch = job
    return profile_step(cfg, method, data, k=k, warmup=warmup, seed=seed, batch=batch)


def compare_methods(cfg: BackboneConfig, methods: Sequence[MethodConfig], data: SyntheticDataset, *,
                    k: int = 20, warmup: int = 2, seed: int = 0, batch: int = 4,
                    parallel: bool = False) -> ComparisonReport:
    """Profile each method; deltas are relative to full fine-tuning."""
    if len(methods) < 2:
        raise ValueError("compare needs at least two methods")
    queue = list(methods)
    if not any(m.name == "full" for m in queue):
        queue.append(MethodConfig(name="full"))
    jobs = [(cfg, m, data, k, warmup, seed, batch) for m in queue]
    if parallel:
        log.warning("parallel compare: step times are measured concurrently and are not comparable")
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            profiles = list(pool.map(_profile_job, jobs))
    else:
        profiles = [_profile_job(job) for job in jobs]

    by_label = {p.method: p for p in profiles}
    full = next(p for m, p in zip(queue, profiles) if m.name == "full")
    report = ComparisonReport(backbone=cfg.name, seed=seed, k=k)
    for m in methods:
        p = by_label[m.label]
        report.rows.append(ComparisonRow(
            method=m.label,
            trainable_params=p.trainable_params,
            delta_params_pct=round(_pct(p.trainable_params, full.trainable_params), 2),
            grad_bytes=p.grad_bytes,
            delta_mem_pct=round(_pct(p.grad_bytes, full.grad_bytes), 2),
            step_time_ms=round(p.step_time_ms, 3),
            delta_time_pct=round(_pct(p.step_time_ms, full.step_time_ms), 2),
            n_backbone_grad_nodes=p.n_backbone_grad_nodes,
        ))
    return report


def time_ordering_holds(cfg: BackboneConfig, faster: MethodConfig, slower: MethodConfig,
                        data: SyntheticDataset, *, k: int = 20, attempts: int = 3, seed: int = 0) -> bool:
    """True if ``faster``'s median step time is not above ``slower``'s in any of ``attempts`` tries."""
    for attempt in range(attempts):
        fast = profile_step(cfg, faster, data, k=k, seed=seed)
        slow = profile_step(cfg, slower, data, k=k, seed=seed)
        if fast.step_time_ms <= slow.step_time_ms:
            return True
        log.warning("timing attempt %d: %s %.2fms > %s %.2fms, retrying", attempt + 1,
                    fast.method, fast.step_time_ms, slow.method, slow.step_time_ms)
    return False


def ablate(cfg: BackboneConfig, data: SyntheticDataset, *, steps: int, seed: int = 0, alpha: int = 8,
           toggles: Sequence[str] = ("trainable_reduction", "train_fpn_norm"),
           train_cfg: TrainConfig | None = None) -> AblationReport:
    """Train e3va over every on/off combination of ``toggles``."""
    allowed = {"trainable_reduction", "train_fpn_norm"}
    unknown = set(toggles) - allowed
    if unknown or not toggles:
        raise ValueError(f"toggles must be a non-empty subset of {sorted(allowed)}, got {list(toggles)}")
    report = AblationReport(backbone=cfg.name, alpha=alpha, seed=seed, steps=steps)
    baseline = None
    for values in itertools.product((False, True), repeat=len(toggles)):
        flags = {"trainable_reduction": False, "train_fpn_norm": False, **dict(zip(toggles, values))}
        method = MethodConfig(name="e3va", alpha=alpha, **flags)
        result = train(cfg, method, data, steps=steps, seed=seed, train_cfg=train_cfg)
        baseline = result.trainable_params if baseline is None else baseline
        report.rows.append(AblationRow(
            trainable_reduction=flags["trainable_reduction"],
            train_fpn_norm=flags["train_fpn_norm"],
            trainable_params=result.trainable_params,
            delta_params=result.trainable_params - baseline,
            final_loss=result.final_loss,
            final_pixel_acc=result.final_pixel_acc,
        ))
    return report


def render_comparison(report: ComparisonReport, console: Console | None = None) -> None:
    """Measured deltas next to the published Swin-B reference figures."""
    console = console or Console(stderr=True)
    table = Table(title=f"{report.backbone}: per-step cost vs full (k={report.k})")
    for col in ("method", "trainable", "Δparams %", "grad MB", "Δmem %", "ref Δmem %",
                "ms/step", "time %", "ref time %", "bb grad nodes"):
        table.add_column(col, justify="left" if col == "method" else "right")
    for r in report.rows:
        name = r.method.split("-a")[0]
        ref_mem = REFERENCE_MEM_DELTA_PCT.get(name)
        ref_time = REFERENCE_TIME_PCT.get(name)
        table.add_row(
            r.method, f"{r.trainable_params:,}", f"{r.delta_params_pct:+.2f}",
            f"{r.grad_bytes / 2**20:.2f}", f"{r.delta_mem_pct:+.2f}",
            "" if ref_mem is None else f"{ref_mem:+.2f}",
            f"{r.step_time_ms:.2f}", f"{100.0 + r.delta_time_pct:.2f}",
            "" if ref_time is None else f"{ref_time:.2f}",
            str(r.n_backbone_grad_nodes),
        )
    console.print(table)


def render_ablation(report: AblationReport, console: Console | None = None) -> None:
    console = console or Console(stderr=True)
    table = Table(title=f"{report.backbone}: e3va α={report.alpha} ablation ({report.steps} steps)")
    for col in ("reduction", "fpn norm", "trainable", "Δparams", "final loss", "pixel acc"):
        table.add_column(col, justify="right")
    for r in report.rows:
        table.add_row("trainable" if r.trainable_reduction else "inherited",
                      "train" if r.train_fpn_norm else "frozen", f"{r.trainable_params:,}",
                      f"{r.delta_params:+,}", f"{r.final_loss:.4f}", f"{r.final_pixel_acc:.3f}")
    console.print(table)
