"""Toy-scale pair datasets, spoofing metrics, score distributions and ablation grids."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from capspoof.hashing import keyed_state
from capspoof.policy import GRPOConfig, TabularPolicy, TrainingLog, train
from capspoof.reward import BigramCosine, SimilarityScorer, batch_scores
from capspoof.toylm import ToyLM, generate, prompt_ids_for, token_logprobs, write_sequences, read_sequences
from capspoof.watermark import Detector, WatermarkScheme, watermarked_generate

log = logging.getLogger(__name__)

SEM_THRESHOLD = 0.7
GATE_RATE = 0.9
HIST_WIDTH = 0.5


class GateError(RuntimeError):
    pass


def source_prompts(seed: int, split: str, n: int) -> np.ndarray:
    """Distinct prompt ids for the unwatermarked source texts of a split."""
    tag = {"train": 1, "eval": 2, "null": 3}[split]
    return keyed_state(seed, n, np.full(n, tag), np.arange(n))


@dataclass
class PairDataset:
    train_human: np.ndarray
    train_wm: np.ndarray
    eval_human: np.ndarray
    eval_wm: np.ndarray
    scheme: WatermarkScheme
    lm: ToyLM
    seed: int = 0

    @property
    def length(self) -> int:
        return self.train_human.shape[1]

    def save(self, out: Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train_human", "train_wm", "eval_human", "eval_wm"):
            write_sequences(out / f"{name}.txt", getattr(self, name))

    @classmethod
    def load(cls, out: Path, scheme: WatermarkScheme, lm: ToyLM, seed: int = 0) -> "PairDataset":
        out = Path(out)
        arrays = [read_sequences(out / f"{name}.txt") for name in ("train_human", "train_wm", "eval_human", "eval_wm")]
        return cls(*arrays, scheme=scheme, lm=lm, seed=seed)


def build_pairs(lm: ToyLM, scheme: WatermarkScheme, n: int = 100, length: int = 200, seed: int = 0,
                m: int = 400, gate: bool = True) -> PairDataset:
    """Sample unwatermarked sources and their watermarked rewrites.

    The watermark must be strong enough that over 90% of training rewrites
    are flagged (logit schemes only), otherwise :class:`GateError`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    splits = []
    for split, size in (("train", n), ("eval", m)):
        if size == 0:
            splits += [np.zeros((0, length), dtype=np.int64)] * 2
            continue
        human = generate(lm, source_prompts(seed, split, size), length, rng).tokens
        wm = watermarked_generate(scheme, lm, prompt_ids_for(human), length, rng, sources=human).tokens
        splits += [human, wm]
    ds = PairDataset(splits[0], splits[1], splits[2], splits[3], scheme, lm, seed)
    if gate and not scheme.is_sampling:
        rate = np.mean([d.flagged for d in Detector(scheme, lm).detect_many(ds.train_wm)])
        if rate <= GATE_RATE:
            raise GateError(f"scheme too weak at this configuration (flagged rate {rate:.3f})")
    return ds


# -- metrics ----------------------------------------------------------------------


def _flags(outputs, detector: Callable) -> np.ndarray:
    if hasattr(detector, "detect_many"):
        return np.array([d.flagged for d in detector.detect_many(outputs)], dtype=bool)
    return np.array([bool(detector(o).flagged) for o in outputs], dtype=bool)


def ssr(outputs, originals, detector, sem_scorer: SimilarityScorer | None = None,
        sem_threshold: float = SEM_THRESHOLD) -> float:
    """Fraction of outputs that are flagged and semantically close to their original."""
    if len(outputs) != len(originals):
        raise ValueError("outputs and originals differ in length")
    if len(outputs) == 0:
        return 0.0
    scorer = sem_scorer or BigramCosine()
    sem = np.array([scorer(o, x) for o, x in zip(outputs, originals)])
    return float(np.mean(_flags(outputs, detector) & (sem >= sem_threshold)))


def sr(outputs, detector) -> float:
    if len(outputs) == 0:
        return 0.0
    return float(np.mean(_flags(outputs, detector)))


def zscore_distribution(stats: Sequence[float]) -> dict:
    """Summary of detection statistics with a 0.5-wide histogram."""
    z = np.asarray(stats, dtype=float)
    if z.size < 10:
        raise ValueError("need at least 10 sequences")
    lo = math.floor(z.min() / HIST_WIDTH) * HIST_WIDTH
    hi = max(math.ceil(z.max() / HIST_WIDTH) * HIST_WIDTH, lo + HIST_WIDTH)
    edges = np.arange(lo, hi + HIST_WIDTH / 2, HIST_WIDTH)
    counts, edges = np.histogram(z, bins=edges)
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    return {"n": int(z.size), "mean": float(z.mean()), "std": float(z.std()),
            "quantiles": {str(q): float(v) for q, v in zip(qs, np.quantile(z, qs))},
            "bin_edges": edges.tolist(), "counts": counts.tolist()}


def sequence_zscores(seqs, detector: Detector) -> np.ndarray:
    return np.array([d.statistic for d in detector.detect_many(seqs)])


def capacity_reward_profile(c: np.ndarray, llr: np.ndarray, r: np.ndarray | None = None) -> list[dict]:
    """Mean reward and mean |llr| by decile of the position weight ``c``."""
    c = np.asarray(c, dtype=float).ravel()
    llr = np.asarray(llr, dtype=float).ravel()
    r = c * llr if r is None else np.asarray(r, dtype=float).ravel()
    if c.size < 1000:
        raise ValueError("need at least 1000 token records")
    order = np.argsort(c, kind="stable")
    decile = np.empty(c.size, dtype=np.int64)
    decile[order] = np.arange(c.size) * 10 // c.size
    rows = []
    for d in range(10):
        sel = decile == d
        rows.append({"decile": d, "c_lo": float(c[sel].min()), "c_hi": float(c[sel].max()),
                     "mean_c": float(c[sel].mean()), "mean_r": float(r[sel].mean()),
                     "mean_abs_llr": float(np.abs(llr[sel]).mean()), "n": int(sel.sum())})
    return rows


# -- evaluation ---------------------------------------------------------------------


@dataclass
class EvalResult:
    ssr: float
    sr: float
    mean_sem: float
    mean_statistic: float
    perplexity: float
    statistic_name: str
    records: list[dict] = field(default_factory=list, repr=False)
    outputs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        assert self.ssr <= self.sr + 1e-12

    def summary(self) -> dict:
        return {"ssr": self.ssr, "sr": self.sr, "mean_sem": self.mean_sem,
                f"mean_{self.statistic_name}": self.mean_statistic, "perplexity": self.perplexity}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "z_or_pvalue", "flagged", "sem", "ssr_pass"])
            w.writeheader()
            w.writerows(self.records)


def greedy_outputs(policy: TabularPolicy, sources: np.ndarray) -> np.ndarray:
    sources = np.atleast_2d(sources)
    return generate(policy.ref, prompt_ids_for(sources), sources.shape[1], sources=sources,
                    sampler="greedy", adjust=policy.adjust()).tokens


def evaluate_outputs(outputs: np.ndarray, originals: np.ndarray, detector: Detector, lm: ToyLM,
                     scorer: SimilarityScorer | None = None, sem_threshold: float = SEM_THRESHOLD) -> EvalResult:
    scorer = scorer or BigramCosine()
    dets = detector.detect_many(outputs)
    flagged = np.array([d.flagged for d in dets], dtype=bool)
    sampling = detector.scheme.is_sampling
    stat = np.array([d.pvalue if sampling else d.statistic for d in dets])
    sem = batch_scores(scorer, outputs, originals)
    passed = flagged & (sem >= sem_threshold)
    nll = -token_logprobs(lm, outputs, prompt_ids_for(originals)).mean(axis=1)
    records = [{"id": i, "z_or_pvalue": repr(float(stat[i])), "flagged": int(flagged[i]),
                "sem": repr(float(sem[i])), "ssr_pass": int(passed[i])} for i in range(len(dets))]
    return EvalResult(float(passed.mean()), float(flagged.mean()), float(sem.mean()), float(stat.mean()),
                      float(np.exp(nll).mean()), "pvalue" if sampling else "z", records, outputs)


def evaluate_policy(policy: TabularPolicy, ds: PairDataset, detector: Detector | None = None,
                    scorer: SimilarityScorer | None = None) -> EvalResult:
    detector = detector or Detector(ds.scheme, ds.lm)
    return evaluate_outputs(greedy_outputs(policy, ds.eval_human), ds.eval_human, detector, ds.lm, scorer)


# -- training harness and ablations --------------------------------------------------


@dataclass
class RunResult:
    policy: TabularPolicy
    log: TrainingLog
    initial: EvalResult
    final: EvalResult
    reward_records: list = field(default_factory=list, repr=False)


def run_training(ds: PairDataset, cfg: GRPOConfig, order: int = 1, keep_rewards: bool = False,
                 snapshot_every_epoch: bool = True) -> RunResult:
    """Train from the reference on the train split; greedy evaluation on the eval split."""
    detector = Detector(ds.scheme, ds.lm)
    base = TabularPolicy(ds.lm, order)
    initial = evaluate_policy(base, ds, detector)
    snapshots: list[EvalResult] = []

    def snap(p):
        res = initial if not snapshots else evaluate_policy(p, ds, detector)
        snapshots.append(res)
        return res.summary()

    sink: list | None = [] if keep_rewards else None
    trained, tlog = train(base, ds.train_human, ds.train_wm, cfg,
                          evaluate=snap if snapshot_every_epoch else None, reward_sink=sink)
    final = snapshots[-1] if snapshot_every_epoch else evaluate_policy(trained, ds, detector)
    return RunResult(trained, tlog, initial, final, sink or [])


VARIANT_KEYS = {"weight": ("capacity", "uniform", "pmax"), "semantic": ("Min", "Avg", "Hum", "WM"),
                "anchor": ("on", "off")}
_WEIGHT_ALIASES = {"1-pmax": "capacity", "capacity": "capacity", "uniform": "uniform", "1": "uniform",
                   "pmax": "pmax"}


def parse_variant(text: str) -> dict:
    """``"weight=uniform,anchor=off"`` -> ``{"weight": "uniform", "anchor": "off"}``; ``"base"`` -> ``{}``."""
    out: dict = {}
    text = text.strip()
    if text in ("", "base"):
        return out
    for part in text.split(","):
        key, _, val = part.partition("=")
        key, val = key.strip(), val.strip()
        if key == "weight":
            val = _WEIGHT_ALIASES.get(val, val)
        if key not in VARIANT_KEYS or val not in VARIANT_KEYS[key]:
            raise ValueError(f"invalid variant {part!r}")
        out[key] = val
    return out


def variant_name(variant: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in variant.items()) or "base"


def apply_variant(cfg: GRPOConfig, variant: dict) -> GRPOConfig:
    changes = {}
    if "weight" in variant:
        changes["weighting"] = variant["weight"]
    if "semantic" in variant:
        changes["semantic"] = variant["semantic"]
    if variant.get("anchor") == "off":
        changes["w3"] = 0.0
    return dataclasses.replace(cfg, **changes)


GRID_FIELDS = ["variant", "scheme", "ssr", "sr", "mean_sem", "seed", "mean_statistic"]


def run_ablation(variants: Iterable[dict], base_cfg: GRPOConfig, lm: ToyLM, scheme: WatermarkScheme,
                 seeds: Sequence[int] = (42, 1234), n: int = 100, m: int = 400, length: int = 200,
                 order: int = 1) -> list[dict]:
    """One full train + eval per (variant, seed) cell; the dataset is shared across variants per seed."""
    grid = []
    datasets = {s: build_pairs(lm, scheme, n, length, s, m) for s in seeds}
    for variant in variants:
        for s in seeds:
            cfg = dataclasses.replace(apply_variant(base_cfg, variant), seed=s)
            res = run_training(datasets[s], cfg, order, snapshot_every_epoch=False)
            grid.append({"variant": variant_name(variant), "scheme": scheme.algorithm_name,
                         "ssr": res.final.ssr, "sr": res.final.sr, "mean_sem": res.final.mean_sem,
                         "seed": s, "mean_statistic": res.final.mean_statistic})
            log.info("ablation %s seed=%d -> %s", variant_name(variant), s, res.final.summary())
    return grid


def write_grid(grid: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_FIELDS)
        w.writeheader()
        for row in grid:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
