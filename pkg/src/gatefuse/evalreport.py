"""Accuracy, gate alignment and the variant comparison harness."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .errors import ConfigurationError, InputError
from .gating import GateReport

EVAL_BATCH = 256


@dataclass
class EvalResult:
    accuracy: float
    gate_top1_alignment: float  # nan when the variant has no gates
    mean_beta: dict[tuple[int, ...], dict[int, float]]  # queried modalities -> modality -> mean beta
    fallback_rate: float
    n: int
    mean_beta_all: dict[int, float] = field(default_factory=dict)

    def summary_row(self) -> dict[str, object]:
        row = {
            "n": self.n,
            "accuracy": self.accuracy,
            "gate_top1_alignment": self.gate_top1_alignment,
            "fallback_rate": self.fallback_rate,
        }
        for m, b in sorted(self.mean_beta_all.items()):
            row[f"mean_beta_m{m}"] = b
        for q, betas in sorted(self.mean_beta.items()):
            tag = "+".join(str(x) for x in q)
            for m, b in sorted(betas.items()):
                row[f"mean_beta_m{m}_query{tag}"] = b
        return row


@dataclass
class SampleRecord:
    index: int
    answer: int
    prediction: tuple[int, ...]
    informative: tuple[int, ...]
    report: GateReport


def predict_records(params, episodes, config: M.ModelConfig, batch_size: int = EVAL_BATCH) -> list[SampleRecord]:
    """Greedy predictions and gate reports, in episode-index order."""
    episodes = sorted(episodes, key=lambda e: e.index)
    records = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start : start + batch_size]
        pred, fusion = M.predict(params, chunk, config)
        for b, ep in enumerate(chunk):
            records.append(SampleRecord(ep.index, ep.answer, tuple(int(x) for x in pred[b]),
                                        tuple(ep.informative), fusion.report(b)))
    return records


def summarize(records: list[SampleRecord], answers_of=None) -> EvalResult:
    """Aggregate per-sample records; sums are exact (fsum), so order never matters."""
    if not records:
        raise InputError("cannot evaluate an empty split")
    records = sorted(records, key=lambda r: r.index)
    n = len(records)
    answers_of = answers_of or (lambda r: (r.answer,))
    correct = sum(r.prediction == answers_of(r) for r in records)
    gated = [r for r in records if r.report.beta]
    align = (
        sum(r.report.top_modality() in r.informative for r in gated) / len(gated) if gated else float("nan")
    )
    fallback = sum(r.report.any_fallback for r in records) / n
    by_query: dict[tuple[int, ...], dict[int, list[float]]] = {}
    overall: dict[int, list[float]] = {}
    for r in gated:
        q = by_query.setdefault(r.informative, {})
        for m, b in r.report.beta.items():
            q.setdefault(m, []).append(b)
            overall.setdefault(m, []).append(b)
    mean_beta = {q: {m: math.fsum(v) / len(v) for m, v in sorted(d.items())} for q, d in sorted(by_query.items())}
    mean_all = {m: math.fsum(v) / len(v) for m, v in sorted(overall.items())}
    return EvalResult(correct / n, align, mean_beta, fallback, n, mean_all)


def evaluate(params, episodes, config: M.ModelConfig, batch_size: int = EVAL_BATCH, predictor=None) -> EvalResult:
    """Greedy exact-match accuracy plus gate metrics.

    ``predictor(episode) -> answer tokens`` replaces the model's predictions
    (gate metrics then come from the model only if ``params`` is given).
    """
    if not episodes:
        raise InputError("cannot evaluate an empty split")
    if predictor is not None and params is None:
        records = [
            SampleRecord(ep.index, ep.answer, tuple(np.atleast_1d(predictor(ep)).tolist()), tuple(ep.informative),
                         GateReport())
            for ep in sorted(episodes, key=lambda e: e.index)
        ]
    else:
        records = predict_records(params, episodes, config, batch_size)
        if predictor is not None:
            by_index = {ep.index: ep for ep in episodes}
            for r in records:
                r.prediction = tuple(np.atleast_1d(predictor(by_index[r.index])).tolist())
    return summarize(records)


def gate_rows(records: list[SampleRecord], modalities) -> list[dict[str, object]]:
    rows = []
    for r in sorted(records, key=lambda r: r.index):
        row = {
            "index": r.index,
            "answer": r.answer,
            "prediction": " ".join(str(x) for x in r.prediction),
            "informative": " ".join(str(x) for x in r.informative),
            "top_modality": "" if r.report.top_modality() is None else r.report.top_modality(),
        }
        row.update(r.report.csv_fields(modalities))
        rows.append(row)
    return rows


def write_csv(rows: list[dict], path, columns: list[str] | None = None) -> Path:
    path = Path(path)
    if columns is None:
        columns = []
        for row in rows:
            for k in row:
                if k not in columns:
                    columns.append(k)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c, "")) for c in columns])
    return path


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


# --- variant comparison -----------------------------------------------------------

@dataclass
class VariantRun:
    variant: str
    seed: int
    accuracy: float
    gate_top1_alignment: float
    best_step: int


def run_variant(variant: str, dataset, seed: int, train_config, model_kwargs: dict | None = None,
                split: str = "test") -> VariantRun:
    from .fusion import FusionConfig
    from .trainer import train

    model_kwargs = dict(model_kwargs or {})
    fusion_kw = model_kwargs.pop("fusion", {})
    spec = dataset.spec
    fusion = FusionConfig.for_variant(
        variant, modalities=tuple(zip(spec.ids, spec.modality_dims)), **fusion_kw
    )
    cfg = M.ModelConfig(fusion=fusion, vocab_in=spec.vocab_size, vocab_ans=spec.n_classes, **model_kwargs)
    tc = _with_seed(train_config, seed)
    result = train(M.init_params(cfg, seed), [dataset], cfg, tc)
    res = evaluate(result.params, dataset.split(split), cfg)
    return VariantRun(variant, seed, res.accuracy, res.gate_top1_alignment, result.best_step)


def _with_seed(train_config, seed: int):
    from dataclasses import replace

    return replace(train_config, seed=int(seed))


def compare_variants(variants, dataset, seeds, train_config, model_kwargs: dict | None = None,
                     split: str = "test", min_seeds: int = 3) -> tuple[list[dict], list[VariantRun]]:
    """Train every variant on every seed (shared data and budget) and tabulate mean/std."""
    variants = list(variants)
    seeds = [int(s) for s in seeds]
    if not variants:
        raise ConfigurationError("compare_variants needs at least one variant")
    if len(seeds) < min_seeds:
        warnings.warn(f"only {len(seeds)} seed(s); statistics are degenerate", stacklevel=2)
    runs = [run_variant(v, dataset, s, train_config, model_kwargs, split) for v in variants for s in seeds]
    # one row per listed entry, so a variant listed twice yields two rows
    k = len(seeds)
    rows = [_table_row(v, runs[i * k : (i + 1) * k]) for i, v in enumerate(variants)]
    return rows, runs


def comparison_table(runs: list[VariantRun], variants=None) -> list[dict]:
    variants = variants or list(dict.fromkeys(r.variant for r in runs))
    return [_table_row(v, [r for r in runs if r.variant == v]) for v in variants]


def _table_row(variant: str, rs: list[VariantRun]) -> dict:
    acc = np.array([r.accuracy for r in rs])
    align = np.array([r.gate_top1_alignment for r in rs])
    return {
        "variant": variant,
        "n_seeds": len(rs),
        "accuracy_mean": float(acc.mean()),
        "accuracy_std": float(acc.std(ddof=1)) if len(rs) > 1 else float("nan"),
        "alignment_mean": float(align.mean()) if not np.all(np.isnan(align)) else float("nan"),
        "alignment_std": float(align.std(ddof=1)) if len(rs) > 1 and not np.any(np.isnan(align)) else float("nan"),
        "seeds": " ".join(str(r.seed) for r in rs),
        "accuracies": " ".join(repr(float(a)) for a in acc),
    }


COMPARISON_COLUMNS = ["variant", "n_seeds", "accuracy_mean", "accuracy_std", "alignment_mean",
                      "alignment_std", "seeds", "accuracies"]
