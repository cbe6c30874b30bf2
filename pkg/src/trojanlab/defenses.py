"""Gaussian weight-noise fine-tuning and norm-difference estimation over head updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .finetune import (
    AttackBench,
    AttackMetrics,
    CellResult,
    FineTuneConfig,
    PoisonedDataset,
    UpdateTrace,
    finetune,
    run_cell,
)
from .model import VqaModel
from .numcore import Rng


@dataclass(frozen=True)
class DpConfig:
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def finetune_with_dp(model: VqaModel, poisoned: PoisonedDataset, cfg: FineTuneConfig, dp: DpConfig,
                     rng: Rng, features=None) -> tuple[VqaModel, UpdateTrace]:
    """:func:`finetune` with N(0, sigma^2) noise on every head parameter before each batch step."""
    return finetune(model, poisoned, cfg, rng, dp_sigma=dp.sigma, features=features)


def dp_cell(bench: AttackBench, cfg: FineTuneConfig, dp: DpConfig, seed: int) -> CellResult:
    return run_cell(bench, cfg, seed, dp_sigma=dp.sigma)


def dp_sweep(bench: AttackBench, cfg: FineTuneConfig, sigmas, seeds) -> list[CellResult]:
    return [dp_cell(bench, cfg, DpConfig(float(s)), seed) for s in sigmas for seed in seeds]


@dataclass
class NormReport:
    benign_norms: list[float]
    malicious_norms: list[float]

    @property
    def ratio(self) -> float:
        benign = float(np.mean(self.benign_norms))
        if benign == 0.0:
            return float("inf") if np.mean(self.malicious_norms) > 0 else float("nan")
        return float(np.mean(self.malicious_norms)) / benign


def update_norm(trace: UpdateTrace) -> float:
    """L2 norm of the whole-run head delta (final minus initial parameters)."""
    return float(np.sqrt(np.sum(trace.delta * trace.delta)))


def norm_difference(benign: list[UpdateTrace], malicious: list[UpdateTrace]) -> NormReport:
    if not benign or not malicious:
        raise ValueError("norm-difference estimation needs at least one benign and one malicious run")
    return NormReport([update_norm(t) for t in benign], [update_norm(t) for t in malicious])


def metrics_by_sigma(rows: list[CellResult]) -> dict[float, AttackMetrics]:
    """Seed-mean MTA/ATA per sigma."""
    out: dict[float, AttackMetrics] = {}
    for sigma in sorted({r.sigma for r in rows}):
        sel = [r.metrics for r in rows if r.sigma == sigma]
        out[sigma] = AttackMetrics(float(np.mean([m.mta for m in sel])), float(np.mean([m.ata for m in sel])))
    return out
