import csv

import numpy as np
import pytest

from capspoof.evalkit import (GRID_FIELDS, EvalResult, GateError, PairDataset, apply_variant, build_pairs,
                              capacity_reward_profile, evaluate_outputs, parse_variant, run_ablation,
                              run_training, sequence_zscores, sr, ssr, variant_name, write_grid,
                              zscore_distribution)
from capspoof.policy import GRPOConfig
from capspoof.toylm import ToyLM, generate
from capspoof.watermark import Detector, make_scheme


class FlagAll:
    def __call__(self, seq):
        return type("D", (), {"flagged": True})()


class FlagNone:
    def __call__(self, seq):
        return type("D", (), {"flagged": False})()


@pytest.fixture(scope="module")
def small_ds():
    return build_pairs(ToyLM(), make_scheme("KGW"), n=20, length=100, seed=5, m=30)


def test_build_pairs_reproducible_and_gated(small_ds):
    again = build_pairs(ToyLM(), make_scheme("KGW"), n=20, length=100, seed=5, m=30)
    assert np.array_equal(small_ds.train_wm, again.train_wm)
    assert np.array_equal(small_ds.eval_human, again.eval_human)
    assert small_ds.train_human.shape == (20, 100) and small_ds.eval_wm.shape == (30, 100)
    flags = [d.flagged for d in Detector(small_ds.scheme, small_ds.lm).detect_many(small_ds.train_wm)]
    assert np.mean(flags) > 0.9


def test_gate_rejects_unbiased_scheme():
    with pytest.raises(GateError, match="scheme too weak at this configuration"):
        build_pairs(ToyLM(), make_scheme("KGW", delta=0.0), n=20, length=100, seed=0, m=0)
    with pytest.raises(ValueError):
        build_pairs(ToyLM(), make_scheme("KGW"), n=0)


def test_pair_dataset_roundtrip(tmp_path, small_ds):
    small_ds.save(tmp_path)
    back = PairDataset.load(tmp_path, small_ds.scheme, small_ds.lm, small_ds.seed)
    assert np.array_equal(back.train_wm, small_ds.train_wm)


def test_ssr_sr_shapes():
    seqs = np.random.default_rng(0).integers(0, 64, (5, 20))
    assert ssr(seqs, seqs, FlagNone()) == 0.0 and sr(seqs, FlagNone()) == 0.0
    assert ssr(seqs, seqs, FlagAll()) == 1.0 and sr(seqs, FlagAll()) == 1.0
    with pytest.raises(ValueError):
        ssr(seqs, seqs[:3], FlagAll())


def test_ssr_on_unwatermarked_is_false_positive_rate():
    lm = ToyLM()
    seqs = generate(lm, np.arange(1, 401, dtype=np.uint64), 200, np.random.default_rng(1)).tokens
    det = Detector(make_scheme("KGW"), lm)
    assert ssr(seqs, seqs, det) == sr(seqs, det) < 0.02


def test_zscore_distribution():
    lm = ToyLM()
    det = Detector(make_scheme("KGW"), lm)
    seqs = generate(lm, np.arange(1, 201, dtype=np.uint64), 200, np.random.default_rng(2)).tokens
    summ = zscore_distribution(sequence_zscores(seqs, det))
    assert abs(summ["mean"]) < 0.5 and summ["n"] == 200
    assert np.allclose(np.diff(summ["bin_edges"]), 0.5)
    assert sum(summ["counts"]) == 200
    assert zscore_distribution(np.full(12, 1.5))["std"] == 0.0
    with pytest.raises(ValueError):
        zscore_distribution(np.zeros(9))


def test_zscore_distribution_permutation_invariant():
    z = np.random.default_rng(3).standard_normal(50)
    a, b = zscore_distribution(z), zscore_distribution(z[::-1])
    assert a["counts"] == b["counts"] and a["quantiles"] == b["quantiles"]
    assert a["mean"] == pytest.approx(b["mean"], abs=1e-15)


def test_capacity_profile():
    rng = np.random.default_rng(0)
    c = rng.random(2000)
    rows = capacity_reward_profile(c, np.ones(2000))
    assert len(rows) == 10
    assert all(r["mean_r"] == pytest.approx(r["mean_c"], abs=1e-15) for r in rows)
    assert all(r["mean_r"] == 0 for r in capacity_reward_profile(np.zeros(1500), rng.standard_normal(1500)))
    with pytest.raises(ValueError):
        capacity_reward_profile(c[:999], np.ones(999))


def test_eval_result_invariant_and_csv(tmp_path, small_ds):
    det = Detector(small_ds.scheme, small_ds.lm)
    res = evaluate_outputs(small_ds.eval_wm, small_ds.eval_human, det, small_ds.lm)
    assert res.ssr <= res.sr
    res.write_csv(tmp_path / "e.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert list(rows[0]) == ["id", "z_or_pvalue", "flagged", "sem", "ssr_pass"] and len(rows) == 30
    with pytest.raises(AssertionError):
        EvalResult(0.5, 0.4, 0.0, 0.0, 1.0, "z")


def test_variants():
    assert parse_variant("base") == {}
    v = parse_variant("weight=1-pmax,anchor=off")
    assert v == {"weight": "capacity", "anchor": "off"} and variant_name(v) == "weight=capacity,anchor=off"
    cfg = apply_variant(GRPOConfig(), v)
    assert cfg.w3 == 0 and cfg.weighting == "capacity"
    assert apply_variant(GRPOConfig(), parse_variant("weight=uniform")).weighting == "uniform"
    assert apply_variant(GRPOConfig(), parse_variant("semantic=Avg")).semantic == "Avg"
    with pytest.raises(ValueError):
        parse_variant("weight=cubic")


def test_run_training_and_ablation_grid(tmp_path):
    lm = ToyLM(vocab_size=32)
    scheme = make_scheme("KGW")
    cfg = GRPOConfig(G=3, batch=8, epochs=1, lr=50.0)
    ds = build_pairs(lm, scheme, n=8, length=150, seed=1, m=12)
    res = run_training(ds, cfg)
    assert len(res.log.epochs) == 2 and res.log.epochs[0]["ssr"] == res.initial.ssr
    grid = run_ablation([{}, {"anchor": "off"}], cfg, lm, scheme, seeds=(1,), n=8, m=12, length=150)
    again = run_ablation([{}, {"anchor": "off"}], cfg, lm, scheme, seeds=(1,), n=8, m=12, length=150)
    assert grid == again
    write_grid(grid, tmp_path / "g.csv")
    rows = list(csv.DictReader(open(tmp_path / "g.csv")))
    assert list(rows[0]) == GRID_FIELDS and [r["variant"] for r in rows] == ["base", "anchor=off"]
