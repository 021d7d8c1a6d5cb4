import numpy as np
import pytest

from dircp.evaluate import (
    SeedResult,
    average_precision,
    pd_average_precision,
    run_method,
    spearman,
    sweep,
)
from dircp.geometry import RotatedBox, SectorPartition, sector_of
from dircp.pipeline import RunSettings, prepare_scene
from dircp.report import budget_curve_svg, per_seed_csv, sweep_csv, sweep_json
from dircp.scenario import ScenarioConfig, generate

from _oracles import random_box


def box_at(x, y, conf=1.0, length=4.0, width=2.0):
    return RotatedBox(conf, x, y, length, width, 1.0, 0.0)


class TestAveragePrecision:
    def test_perfect_detector(self):
        truths = [box_at(0, 0), box_at(20, 0)]
        preds = [box_at(0, 0), box_at(20, 0)]
        assert average_precision(preds, truths, 0.5) == 1.0

    def test_no_overlap_zero(self):
        truths = [box_at(0, 0)]
        preds = [box_at(50, 50, conf=0.9)]
        assert average_precision(preds, truths, 0.5) == 0.0

    def test_empty_conventions(self):
        assert average_precision([], [], 0.5) == 1.0
        assert average_precision([box_at(0, 0, 0.5)], [], 0.5) == 0.0
        assert average_precision([], [box_at(0, 0)], 0.5) == 0.0

    def test_hand_pr_curve(self):
        # 2 truths; preds: TP at 0.9, FP at 0.8, TP at 0.7 -> AP = 5/6.
        truths = [box_at(0, 0), box_at(30, 0)]
        preds = [box_at(0, 0, 0.9), box_at(60, 60, 0.8), box_at(30, 0, 0.7)]
        ap = average_precision(preds, truths, 0.5)
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0), rel=1e-12)

    def test_confidence_rescaling_invariance(self):
        rng = np.random.default_rng(0)
        truths = [random_box(rng, span=15.0) for _ in range(6)]
        preds = []
        for i, t in enumerate(truths[:4]):
            preds.append(RotatedBox(0.9 - 0.1 * i, t.cx + 0.3, t.cy, t.length,
                                    t.width, t.cos_a, t.sin_a))
        preds.append(box_at(40, 40, conf=0.55))
        base = average_precision(preds, truths, 0.5)
        rescaled = [RotatedBox(p.confidence / 2.0, p.cx, p.cy, p.length, p.width,
                               p.cos_a, p.sin_a) for p in preds]
        assert average_precision(rescaled, truths, 0.5) == base

    def test_duplicate_matched_tp_never_increases(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            truths = [random_box(rng, span=12.0) for _ in range(4)]
            preds = [RotatedBox(0.8, t.cx, t.cy, t.length, t.width, t.cos_a, t.sin_a)
                     for t in truths[:3]]
            base = average_precision(preds, truths, 0.5)
            dup = preds + [preds[0]]
            assert average_precision(dup, truths, 0.5) <= base + 1e-12


class TestPdAveragePrecision:
    def test_concentrated_scene(self):
        part = SectorPartition.uniform(4)
        truths = [box_at(10, 5), box_at(8, 3)]   # both sector 0
        preds = [box_at(10, 5, 0.9), box_at(8, 3, 0.8)]
        per = pd_average_precision(preds, truths, part, 0.5)
        assert per[0] == average_precision(preds, truths, 0.5) == 1.0
        assert per[1] == per[2] == per[3] == 1.0  # empty-empty convention

    def test_single_sector_equals_global(self):
        part = SectorPartition.uniform(1)
        rng = np.random.default_rng(2)
        truths = [random_box(rng, span=10.0) for _ in range(5)]
        preds = [RotatedBox(0.7, t.cx + 0.2, t.cy, t.length, t.width,
                            t.cos_a, t.sin_a) for t in truths[:3]]
        per = pd_average_precision(preds, truths, part, 0.5)
        assert per == [average_precision(preds, truths, 0.5)]

    def test_matches_filter_recompute_oracle(self):
        part = SectorPartition.uniform(4, frame_origin=(1.0, -1.0))
        rng = np.random.default_rng(7)
        truths = [random_box(rng, span=18.0) for _ in range(10)]
        preds = [random_box(rng, span=18.0, confidence=float(rng.uniform(0.2, 1)))
                 for _ in range(12)]
        per = pd_average_precision(preds, truths, part, 0.5)
        for sector in range(4):
            p = [b for b in preds if sector_of(b, part) == sector]
            t = [b for b in truths if sector_of(b, part) == sector]
            assert per[sector] == average_precision(p, t, 0.5)


def eval_config(seed=0, **kw):
    base = dict(seed=seed, area_side=32.0, n_collaborators=2, n_vehicles=5,
                sensor_range=16.0, occlusion_enabled=True, dropout_prob=0.1)
    base.update(kw)
    return ScenarioConfig(**base)


SETTINGS = RunSettings(sigma2=3.0)


class TestRunMethod:
    def test_budget_zero_identical_across_methods(self):
        world = generate(eval_config(seed=3))
        scene = prepare_scene(world, SETTINGS)
        results = [run_method(world, m, 0.0, SETTINGS, scene=scene)
                   for m in ("directed", "uniform", "single")]
        assert results[0].core_dict() == results[1].core_dict() == results[2].core_dict()
        assert results[0].bytes_transmitted == 0

    def test_full_budget_dominates_single_strict_over_20_seeds(self):
        # Full information (no occlusion, no dropout): with the degenerate
        # single-sector partition there is no sector-boundary bookkeeping, and
        # at IoU 0.5 every added detection is clean, so dominance is strict
        # seed by seed.
        settings = RunSettings(sigma2=3.0, n_dir=1, interest=(0.9,))
        for seed in range(20):
            cfg = ScenarioConfig(seed=seed, area_side=32.0, n_collaborators=2,
                                 n_vehicles=5, density_profile=(1.0,),
                                 sensor_range=16.0, occlusion_enabled=False,
                                 dropout_prob=0.0)
            world = generate(cfg)
            scene = prepare_scene(world, settings)
            single = run_method(world, "single", 1.0, settings, scene=scene)
            for method in ("directed", "uniform"):
                full = run_method(world, method, 1.0, settings, scene=scene)
                assert full.ap_at_pd_iou[0.5][0] >= single.ap_at_pd_iou[0.5][0] - 1e-12

    def test_full_budget_dominates_single_per_sector_aggregate(self):
        # Four-sector variant, aggregated over seeds. Individual seeds can
        # rank a sector-boundary-straddling box or a marginal-IoU box above a
        # true positive once confidences stop being tied, so the per-seed
        # claim only holds on average; at IoU 0.7 the marginal-box rank
        # jitter needs a small tolerance.
        acc = {m: {t: [] for t in SETTINGS.iou_thresholds}
               for m in ("single", "directed", "uniform")}
        for seed in range(20):
            world = generate(eval_config(seed=seed, occlusion_enabled=False,
                                         dropout_prob=0.0))
            scene = prepare_scene(world, SETTINGS)
            for m in acc:
                r = run_method(world, m, 1.0, SETTINGS, scene=scene)
                for t in acc[m]:
                    acc[m][t].append(r.ap_at_pd_iou[t])
        for t, slack in ((0.5, 1e-9), (0.7, 0.02)):
            single_mean = np.mean(acc["single"][t], axis=0)
            for m in ("directed", "uniform"):
                full_mean = np.mean(acc[m][t], axis=0)
                assert np.all(full_mean >= single_mean - slack), (m, t)

    def test_masked_sector_ap_helper(self):
        r = SeedResult(seed=0, method="directed", budget=0.2, loss_sigma=1.0,
                       mask=(1, 0, 1, 0),
                       ap_at_iou={0.5: 0.5},
                       ap_at_pd_iou={0.5: (0.8, 0.2, 0.6, 0.4)},
                       bytes_transmitted=0, n_predictions=0, n_truths=0)
        assert r.masked_sector_ap(0.5) == pytest.approx(0.7)


class TestSweep:
    def test_singleton_grid_matches_run_method(self):
        scenario = eval_config(seed=11)
        result = sweep(scenario, SETTINGS, budgets=[0.2], sigmas=[1.0],
                       seeds=[11], methods=("directed",))
        assert len(result.rows) == 1
        world = generate(scenario)
        direct = run_method(world, "directed", 0.2, SETTINGS)
        row = result.rows[0]
        for t in SETTINGS.iou_thresholds:
            assert row.mean_ap_at_iou[t] == direct.ap_at_iou[t]

    def test_deterministic_and_job_invariant(self):
        scenario = eval_config(seed=5)
        kwargs = dict(budgets=[0.1, 0.3], sigmas=[1.0], seeds=[5, 6],
                      methods=("directed", "single"))
        a = sweep(scenario, SETTINGS, **kwargs)
        b = sweep(scenario, SETTINGS, **kwargs)
        assert sweep_json(a) == sweep_json(b)
        c = sweep(scenario, SETTINGS, jobs=2, **kwargs)
        assert sweep_json(a) == sweep_json(c)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            sweep(eval_config(), SETTINGS, budgets=[], sigmas=[1.0], seeds=[1])

    def test_report_emission(self):
        scenario = eval_config(seed=9)
        result = sweep(scenario, SETTINGS, budgets=[0.1, 0.2], sigmas=[1.0],
                       seeds=[9, 10], methods=("directed", "uniform", "single"))
        csv_text = sweep_csv(result, SETTINGS.iou_thresholds)
        assert csv_text.startswith("budget,sigma,method,")
        assert len(csv_text.strip().split("\n")) == 1 + 2 * 3
        seed_text = per_seed_csv(list(result.per_seed), SETTINGS.iou_thresholds)
        assert len(seed_text.strip().split("\n")) == 1 + len(result.per_seed)
        svg = budget_curve_svg(result, 0.5, 1.0)
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert "polyline" in svg


class TestSpearman:
    def test_monotone_is_one(self):
        assert spearman([1, 2, 3, 4], [0.1, 0.2, 0.5, 0.9]) == pytest.approx(1.0)

    def test_reversed_is_minus_one(self):
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_one_swap(self):
        assert spearman([1, 2, 3, 4, 5], [1, 2, 4, 3, 5]) == pytest.approx(0.9)


class TestPayloadAccounting:
    def test_bytes_non_decreasing_in_budget(self):
        world = generate(eval_config(seed=21))
        scene = prepare_scene(world, SETTINGS)
        prev = -1
        for budget in (0.0, 0.05, 0.1, 0.25, 0.5, 1.0):
            r = run_method(world, "directed", budget, SETTINGS, scene=scene)
            assert r.bytes_transmitted >= prev
            prev = r.bytes_transmitted
        assert prev > 0
