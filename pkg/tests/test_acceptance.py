"""Acceptance gate: every shipping criterion at its stated tolerance.

Each test prints one `[PASS]`/`[FAIL]` line (visible with `pytest -s`) and
enforces its runtime ceiling. The committed fixtures under `fixtures/` are
required; nothing here invokes the reference trainer.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

from psub.aggregate import (AggregatorParams, FeatureRecord,
                            aggregate_attention, aggregate_avg,
                            attention_matrix, entropy_weights,
                            perpixel_entropy_weights)
from psub.forward import (Selection, align_feature, default_selection,
                          forward_with_selection, neighbor_batch, offset,
                          selection_space)
from psub.infer import evaluate_dataset, predict
from psub.modelio import load_idx, load_model
from psub.search import BudgetConfig, exhaustive_search, search_frontier
from psub.train import TrainHyper, attention_loss_and_grads, train_aggregator

from conftest import FIXTURES, make_conv_net, make_identity_net
from oracles import strided_forward, strided_forward_fast

SEEDS = (0, 1, 2, 3, 4)
WINDOW = (1, 3)  # searchable layers are few, so the window stays unrestricted


def _report(name: str, ok: bool, elapsed: float, limit: float, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}: {elapsed:.1f}s (limit {limit:.0f}s) {detail}")
    assert ok, f"{name}: {detail}"
    assert elapsed < limit, f"{name}: took {elapsed:.1f}s, limit {limit}s"


def corpus_models():
    models = [load_model(FIXTURES / f"model_seed{s}.psb") for s in SEEDS]
    rng = np.random.default_rng(99)
    models.append(make_conv_net(rng, channels=(4, 6), rates=((2, 2), (2, 2)),
                                input_hw=8, with_maxpool=True))
    models.append(make_conv_net(rng, channels=(3, 4), rates=((2, 2), (3, 3)),
                                input_hw=12))
    return models


class TestAcceptance:
    def test_a1_phase_consistency(self, fixtures_dir):
        """Default-state forward equals the conventional strided pass <= 1e-6."""
        t0 = time.time()
        rng = np.random.default_rng(0)
        worst = 0.0
        for g in corpus_models():
            # Matched float64 precision isolates decomposed-vs-fused
            # execution from accumulation rounding.
            x = rng.uniform(0, 1, g.input_shape).astype(np.float64)
            _, logits = forward_with_selection(g, x, default_selection(g))
            ref = strided_forward_fast(g, x)
            worst = max(worst, float(np.max(np.abs(logits - ref))))
            if g.input_shape[1] <= 12:
                ref_slow = strided_forward(g, x)
                worst = max(worst, float(np.max(np.abs(logits - ref_slow))))
        _report("phase-consistency", worst <= 1e-6, time.time() - t0, 5,
                f"max dev {worst:.2e}")

    def test_a2_stride_trick_equivalence(self, fixtures_dir):
        """neighbor_batch equals independent forwards <= 1e-6, 100 triples."""
        t0 = time.time()
        rng = np.random.default_rng(1)
        worst = 0.0
        checked = 0
        while checked < 100:
            rates = tuple((int(rng.integers(1, 4)), int(rng.integers(1, 4)))
                          for _ in range(int(rng.integers(1, 3))))
            hw = int(np.prod([max(r) for r in rates])) * 2
            g = make_conv_net(rng, channels=tuple(
                int(rng.integers(2, 5)) for _ in rates), rates=rates,
                input_hw=hw, with_maxpool=bool(rng.integers(0, 2)))
            x = rng.normal(size=g.input_shape).astype(np.float32)
            layer = int(rng.integers(1, len(rates) + 1))
            s = default_selection(g)
            for ns, feature, logits in neighbor_batch(g, x, s, layer):
                f2, l2 = forward_with_selection(g, x, ns)
                worst = max(worst,
                            float(np.max(np.abs(feature - f2))),
                            float(np.max(np.abs(logits - l2))))
            checked += 1
        _report("stride-trick-equivalence", worst <= 1e-6, time.time() - t0,
                30, f"max dev {worst:.2e} over {checked} triples")

    def test_a3_offset_oracle(self, fixtures_dir):
        """Aligned impulse displacement is exactly (0,0) for all states."""
        t0 = time.time()
        cases = [
            [(2, 2), (2, 2)],          # |S| = 16
            [(2, 2), (3, 3)],          # |S| = 36
            [(3, 3), (2, 2)],          # |S| = 36
            [(2, 3), (3, 2)],          # |S| = 36
            [(2, 2), (2, 2), (2, 2)],  # |S| = 64
        ]
        mismatches = 0
        total = 0
        for rates in cases:
            ph = int(np.prod([r[0] for r in rates]))
            pw = int(np.prod([r[1] for r in rates]))
            hw = int(np.lcm(ph, pw)) * max(ph, pw)
            hw = max(hw, 2 * ph, 2 * pw)
            g = make_identity_net(rates, input_hw=hw)
            n0, m0 = (hw // ph) // 2, (hw // pw) // 2
            for s in selection_space(g):
                dy, dx = offset(s)
                py, px = ph * n0 + dy, pw * m0 + dx
                x = np.zeros((1, hw, hw), np.float32)
                x[0, py, px] = 1.0
                raw, _ = forward_with_selection(g, x, s)
                aligned = align_feature(g, raw, s)
                am = np.unravel_index(int(np.argmax(aligned[0])),
                                      aligned[0].shape)
                total += 1
                mismatches += (am != (py, px))
        _report("offset-oracle", mismatches == 0, time.time() - t0, 30,
                f"{total - mismatches}/{total} states exact")

    def test_a4_search_oracle(self, fixtures_dir):
        """Greedy search agrees with brute force; truncation is consistent."""
        t0 = time.time()
        rng = np.random.default_rng(2)
        failures = []
        for trial in range(50):
            layers = 2 if trial % 2 == 0 else 3
            rates = ((2, 2),) * layers
            g = make_conv_net(rng, channels=tuple(
                int(rng.integers(2, 5)) for _ in range(layers)), rates=rates,
                input_hw=8, num_classes=int(rng.integers(2, 5)))
            x = rng.normal(size=g.input_shape).astype(np.float32)
            space = selection_space(g)
            full_cfg = BudgetConfig(b_ours=len(space), layer_window=(1, layers))
            records, frontier = search_frontier(g, x, full_cfg)
            visited = {r.selection for r in frontier.records}
            brute = exhaustive_search(g, x)
            if visited != {r.selection for r in brute}:
                failures.append(f"trial {trial}: visited != brute force")
                continue
            greedy_crit = sorted(r.criterion for r in records)
            brute_crit = sorted(r.criterion for r in brute)
            if not np.allclose(greedy_crit, brute_crit, atol=1e-9):
                failures.append(f"trial {trial}: criterion multiset mismatch")
                continue
            b = int(rng.integers(2, len(space)))
            part, frontier = search_frontier(
                g, x, BudgetConfig(b_ours=b, layer_window=(1, layers)))
            if len(part) != min(b, len(frontier.records)):
                failures.append(f"trial {trial}: budget law broken")
                continue
            if not any(r.selection.is_default for r in part):
                failures.append(f"trial {trial}: default state missing")
                continue
            ranked = sorted(frontier.records, key=lambda r: r.criterion)
            cutoff = max(r.criterion for r in part)
            better = [r for r in ranked if r.criterion < cutoff][:b - 1]
            returned = {r.selection for r in part}
            if not all(r.selection in returned or r.selection.is_default
                       for r in better):
                failures.append(f"trial {trial}: returned not lowest-b")
        _report("search-oracle", not failures, time.time() - t0, 60,
                failures[0] if failures else "50 trials consistent")

    def test_a5_aggregation_algebra(self, fixtures_dir):
        """Weight normalization, row-stochastic W, exact degenerate cases."""
        t0 = time.time()
        rng = np.random.default_rng(3)
        checks = []

        def rec(feature, logits, entropy):
            return FeatureRecord(Selection((), ()), feature, logits,
                                 entropy, 0.0)

        for _ in range(30):
            b = int(rng.integers(1, 7))
            k = int(rng.integers(2, 8))
            records = [rec(rng.normal(size=(3, 4, 4)).astype(np.float32),
                           rng.normal(size=k).astype(np.float32),
                           float(rng.uniform(0, np.log(k))))
                       for _ in range(b)]
            w = entropy_weights(records, k)
            checks.append(abs(float(w.weights.sum()) - 1.0) <= 1e-6)
            params = AggregatorParams(w_q=rng.normal(size=3),
                                      w_k=rng.normal(size=3),
                                      w_o=rng.normal(size=3))
            att = attention_matrix(records, params)
            checks.append(bool(np.all(np.abs(att.sum(axis=1) - 1.0) <= 1e-6)))
            zero_gain = AggregatorParams(w_q=params.w_q, w_k=params.w_k,
                                         w_o=np.zeros(3))
            same = aggregate_attention(records, zero_gain)
            avg = aggregate_avg([r.aligned_feature for r in records])
            checks.append(bool(np.array_equal(same, avg)))
            seg = [rec(rng.normal(size=(k, 3, 5)).astype(np.float32),
                       rng.normal(size=(k, 3, 5)).astype(np.float32) * 2,
                       0.0) for _ in range(b)]
            pix = perpixel_entropy_weights(seg, k)
            checks.append(bool(np.all(np.abs(pix.sum(axis=0) - 1.0) <= 1e-6)))

        # Budget-one collapse on a committed model.
        g = load_model(FIXTURES / "model_seed0.psb")
        ds = load_idx(FIXTURES / "test-images.idx", FIXTURES / "test-labels.idx")
        cfg = BudgetConfig(b_ours=1, layer_window=WINDOW)
        params = AggregatorParams.initial(40, seed=0)
        for i in range(5):
            x, _ = ds[i]
            _, plain = forward_with_selection(g, x, default_selection(g))
            for mode, p in [("avg", None), ("entropy", None),
                            ("attention", params)]:
                logits = predict(g, x, cfg, mode, p)
                checks.append(bool(np.max(np.abs(logits - plain)) <= 1e-6))
        _report("aggregation-algebra", all(checks), time.time() - t0, 30,
                f"{sum(checks)}/{len(checks)} checks")

    def test_a6_gradient_check(self, fixtures_dir):
        """Analytic gradients vs central differences (float64, h=1e-5)."""
        t0 = time.time()
        rng = np.random.default_rng(4)
        h = 1e-5
        worst = 0.0
        for _ in range(20):
            c = int(rng.integers(2, 6))
            g = make_conv_net(rng, channels=(c,), rates=((2, 2),),
                              input_hw=8, num_classes=int(rng.integers(2, 6)))
            b = int(rng.integers(1, 5))
            feats = [[rng.normal(size=(c, 4, 4)) for _ in range(b)]
                     for _ in range(int(rng.integers(1, 3)))]
            labels = [int(rng.integers(0, g.num_classes)) for _ in feats]
            params = AggregatorParams(w_q=rng.normal(0, 0.1, c),
                                      w_k=rng.normal(0, 0.1, c),
                                      w_o=rng.normal(0, 0.1, c))
            _, g_q, g_k, g_o = attention_loss_and_grads(
                g, feats, labels, params, dtype=np.float64)
            for name, analytic in (("w_q", g_q), ("w_k", g_k), ("w_o", g_o)):
                base = getattr(params, name).astype(np.float64)
                numeric = np.zeros_like(base)
                for i in range(base.size):
                    for sign in (1.0, -1.0):
                        vec = base.copy()
                        vec[i] += sign * h
                        p = AggregatorParams(**{
                            **{n: getattr(params, n)
                               for n in ("w_q", "w_k", "w_o")},
                            name: vec})
                        loss, *_ = attention_loss_and_grads(
                            g, feats, labels, p, dtype=np.float64)
                        numeric[i] += sign * loss / (2 * h)
                scale = max(float(np.abs(numeric).max()), 1e-8)
                worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
        _report("gradient-check", worst <= 1e-3, time.time() - t0, 60,
                f"max rel err {worst:.2e}")

    def test_a7_criterion_accuracy_direction(self, fixtures_dir):
        """Per-state entropy anti-correlates with per-state accuracy."""
        t0 = time.time()
        g = load_model(FIXTURES / "model_seed0.psb")
        ds = load_idx(FIXTURES / "test-images.idx", FIXTURES / "test-labels.idx")
        n = len(ds)
        assert n >= 2000
        states = sorted(selection_space(g), key=lambda s: s.phases)
        hits = np.zeros(len(states))
        entropy_sum = np.zeros(len(states))
        for i in range(n):
            x, y = ds[i]
            records = sorted(exhaustive_search(g, x),
                             key=lambda r: r.selection.phases)
            for j, r in enumerate(records):
                hits[j] += int(np.argmax(r.logits) == y)
                entropy_sum[j] += r.entropy
        rho, _ = stats.spearmanr(entropy_sum / n, hits / n)
        _report("criterion-accuracy-direction", rho < 0, time.time() - t0,
                300, f"Spearman rho {rho:.4f} over {len(states)} states, "
                f"{n} images")

    def test_a8_desk_scale_behavior(self, fixtures_dir):
        """Budgeted search+aggregation helps a real trained toy model."""
        t0 = time.time()
        test = load_idx(FIXTURES / "test-images.idx",
                        FIXTURES / "test-labels.idx")
        train = load_idx(FIXTURES / "train-images.idx",
                         FIXTURES / "train-labels.idx")
        from psub.modelio import IdxDataset
        train_sub = IdxDataset(images=train.images[:512],
                               labels=train.labels[:512])
        lines = []
        ok = True
        wins = {4: 0, 8: 0}
        for seed in SEEDS:
            g = load_model(FIXTURES / f"model_seed{seed}.psb")
            base = evaluate_dataset(
                g, test, BudgetConfig(b_ours=1, layer_window=WINDOW),
                mode="avg", seed=seed)
            ok &= 97.0 <= base.top1 <= 99.5
            ent = {}
            for b in (4, 8):
                r = evaluate_dataset(
                    g, test, BudgetConfig(b_ours=b, layer_window=WINDOW),
                    mode="entropy", seed=seed)
                ent[b] = r
                ok &= r.top1 >= base.top1 - 0.1 - 1e-9
                wins[b] += int(r.correct > base.correct)
            params, _ = train_aggregator(
                g, train_sub, BudgetConfig(b_ours=8, layer_window=WINDOW),
                TrainHyper(lr=1e-3, epochs=3, batch=32, seed=seed))
            att = evaluate_dataset(
                g, test, BudgetConfig(b_ours=8, layer_window=WINDOW),
                mode="attention", params=params, seed=seed)
            ok &= att.top1 >= ent[8].top1 - 0.1 - 1e-9
            lines.append(f"seed{seed} base {base.top1:.2f} "
                         f"b4 {ent[4].top1:.2f} b8 {ent[8].top1:.2f} "
                         f"attention {att.top1:.2f}")
        ok &= wins[4] >= 3 and wins[8] >= 3
        _report("desk-scale-behavior", ok, time.time() - t0, 900,
                "; ".join(lines) + f"; wins {wins}")

    def test_a9_cli_determinism(self, fixtures_dir, tmp_path):
        """Identical seeded invocations produce byte-identical outputs."""
        t0 = time.time()
        model = str(FIXTURES / "model_seed0.psb")
        images = str(FIXTURES / "test-images.idx")
        labels = str(FIXTURES / "test-labels.idx")

        def run(args):
            proc = subprocess.run([sys.executable, "-m", "psub.cli"] + args,
                                  capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            return proc.stdout

        ok = True
        eval_args = ["eval", "--model", model, "--images", images,
                     "--labels", labels, "--budgets", "1,4", "--limit", "64",
                     "--layer-window", "1..3", "--seed", "7", "--timing", "off"]
        a = run(eval_args + ["--out", str(tmp_path / "a.csv")])
        b = run(eval_args + ["--out", str(tmp_path / "b.csv")])
        ok &= (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

        infer_args = ["infer", "--model", model, "--images", images,
                      "--labels", labels, "--index", "3", "--budget", "4",
                      "--layer-window", "1..3", "--seed", "7"]
        ok &= run(infer_args) == run(infer_args)

        train_args = ["train-agg", "--model", model, "--images", images,
                      "--labels", labels, "--budget", "4", "--epochs", "1",
                      "--batch", "16", "--limit", "48", "--seed", "7",
                      "--layer-window", "1..3"]
        run(train_args + ["--out", str(tmp_path / "p1.psb")])
        run(train_args + ["--out", str(tmp_path / "p2.psb")])
        ok &= (tmp_path / "p1.psb").read_bytes() == (tmp_path / "p2.psb").read_bytes()

        verify_args = ["verify", "--model", model,
                       "--golden", str(FIXTURES / "golden_seed0.json")]
        ok &= run(verify_args) == run(verify_args)
        _report("cli-determinism", ok, time.time() - t0, 300, "4 subcommands")
