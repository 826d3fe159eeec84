import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aaalab.attacks import (
    AttackConfig,
    AttackState,
    AttackTrace,
    attack_loss,
    audit_trace,
    constrain,
    greedy_loop,
    in_threat_model,
    nes_gradient,
    nes_proposals,
    project,
    signhunter_chunks,
    square_fraction,
    square_window,
)
from aaalab.defense import DefendedModel
from aaalab.metrics import adversarial_accuracy
from aaalab.model import MlpWeights, quantize8
from aaalab.numkit import InvalidInputError, RngStream


class FlatModel:
    """Scripted model whose outputs never change."""

    mode = "none"

    def oracle_logits(self, x):
        return np.array([2.0, 0.0, -1.0])

    def query(self, x, rng=None):
        z = self.oracle_logits(x)
        return z, z


def linear_model(dim=8, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return MlpWeights(((rng.normal(size=(dim, k)), rng.normal(size=k)),))


class TestAttackLoss:
    def test_margin(self):
        assert attack_loss([3, 1, 0], 0) == 2

    def test_targeted(self):
        assert attack_loss([3, 1, 0], 0, targeted=True, target=2) == 3

    def test_success_iff_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            z = rng.normal(size=5) * 3
            y = int(rng.integers(5))
            for kind in ("logit-margin", "prob-margin"):
                assert (attack_loss(z, y, kind) < 0) == (np.argmax(z) != y)

    def test_cross_entropy(self):
        z = np.array([1.0, 2.0, 0.5])
        lp = z - np.log(np.exp(z).sum())
        assert attack_loss(z, 0, "cross-entropy") == pytest.approx(lp[0])
        assert attack_loss(z, 0, "cross-entropy", True, 2) == pytest.approx(-lp[2])

    def test_bad_class(self):
        with pytest.raises(InvalidInputError):
            attack_loss([1.0, 2.0], 3)


class TestConstraints:
    def test_inside_unchanged(self):
        d = np.array([0.01, -0.02, 0.0])
        np.testing.assert_array_equal(project(d, "linf", 0.05), d)
        np.testing.assert_array_equal(project(d, "l2", 0.05), d)

    def test_l2_scaling(self):
        d = np.array([3.0, 4.0]) / 5 * 0.2
        assert np.linalg.norm(project(d, "l2", 0.1)) == pytest.approx(0.1, rel=1e-12)

    @pytest.mark.parametrize("norm", ["linf", "l2"])
    def test_box_and_ball(self, norm):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            x = rng.random(6)
            eps = rng.uniform(0.01, 0.5)
            d = project(rng.normal(size=6), norm, eps, clean=x)
            size = np.abs(d).max() if norm == "linf" else np.linalg.norm(d)
            assert size <= eps + 1e-12
            assert np.all(x + d >= 0) and np.all(x + d <= 1 + 1e-15)

    @settings(max_examples=300)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["linf", "l2"]), st.floats(0.001, 0.6))
    def test_constrain_feasible(self, seed, norm, eps):
        rng = np.random.default_rng(seed)
        clean = quantize8(rng.random(10))
        cand = clean + rng.normal(size=10) * eps * 2
        assert in_threat_model(constrain(cand, clean, norm, eps), clean, norm, eps)


class TestSquare:
    def test_schedule(self):
        p = 0.05
        assert [square_fraction(p, q) for q in (10, 50, 200, 1000)] == [p, p / 2, p / 4, p / 16]

    def test_window_floor_one(self):
        assert square_window(0.05, 10_000, 16) == 1

    def test_full_window(self):
        assert square_window(1.0, 0, 12) == 12

    def test_vertices(self, toy):
        w, data = toy
        cfg = AttackConfig("square", epsilon=20 / 255, budget=60)
        x = data.x[0]
        tr = greedy_loop(DefendedModel(w), x, int(data.y[0]), cfg, RngStream(1), record_candidates=True)
        for c in tr.candidates:
            d = np.abs(c - x)
            inside = (x > 0.1) & (x < 0.9)
            np.testing.assert_allclose(d[inside], 20 / 255, atol=1e-12)


class TestSimba:
    def test_linear_coordinate_descent(self):
        dim, step = 8, 16 / 255
        w = linear_model(dim)
        x = quantize8(np.full(dim, 0.5))
        y = int(np.argmax(w.layers[0][0].T @ x + w.layers[0][1]))
        rng = RngStream(3)
        # oracle: one pass of coordinate descent in the attack stream's order
        order = rng.child(0).permutation(dim)

        def margin(v):
            z = v @ w.layers[0][0] + w.layers[0][1]
            return z[y] - np.max(np.delete(z, y))

        best, best_l, queries = x.copy(), margin(x), 1
        for i in order:
            for sgn in (1.0, -1.0):
                cand = best.copy()
                cand[i] += sgn * step
                queries += 1
                if margin(cand) < best_l:
                    best, best_l = cand, margin(cand)
                    break
        cfg = AttackConfig("simba", epsilon=step, budget=queries)
        tr = greedy_loop(DefendedModel(w), x, y, cfg, rng, record_candidates=True)
        last = max(i for i, a in enumerate(tr.accepted) if a)
        np.testing.assert_allclose(tr.candidates[last], best, atol=1e-12)
        assert tr.queries == queries

    def test_one_coordinate_per_proposal_no_revisit(self, toy):
        w, data = toy
        x = data.x[1]
        cfg = AttackConfig("simba", epsilon=10 / 255, budget=40)
        tr = greedy_loop(DefendedModel(w), x, int(data.y[1]), cfg, RngStream(2), record_candidates=True)
        best = tr.candidates[0]
        seen = []
        for c, acc in zip(tr.candidates[1:], tr.accepted[1:]):
            changed = np.flatnonzero(np.abs(c - best) > 1e-12)
            assert changed.size == 1
            if not seen or seen[-1] != changed[0]:
                seen.append(int(changed[0]))
            if acc:
                best = c
        first_pass = seen[: x.size]
        assert len(first_pass) == len(set(first_pass))


class TestSignHunter:
    def test_chunks_dim8(self):
        it = signhunter_chunks(8)
        got = [next(it) for _ in range(16)]
        want = [(0, 8), (0, 4), (4, 8), (0, 2), (2, 4), (4, 6), (6, 8)]
        want += [(i, i + 1) for i in range(8)] + [(0, 8)]
        assert got == want

    def test_first_and_vertices(self, toy):
        w, data = toy
        x, eps = data.x[2], 12 / 255
        cfg = AttackConfig("signhunter", epsilon=eps, budget=30)
        tr = greedy_loop(DefendedModel(w), x, int(data.y[2]), cfg, RngStream(0), record_candidates=True)
        np.testing.assert_allclose(tr.candidates[0], constrain(x + eps, x, "linf", eps))
        inside = (x > 0.1) & (x < 0.9)
        for c in tr.candidates:
            np.testing.assert_allclose(np.abs(c - x)[inside], eps, atol=1e-12)


class TestNes:
    def test_quadratic_cosine(self):
        rng = np.random.default_rng(0)
        dim = 8
        a = rng.normal(size=(dim, dim))
        A = a @ a.T / dim + np.eye(dim)
        b = rng.normal(size=dim)
        cos = []
        for trial in range(100):
            x = rng.normal(size=dim)
            g_true = A @ x + b
            g = nes_gradient(lambda v: 0.5 * v @ A @ v + b @ v, x, 0.01, 20, RngStream(trial))
            cos.append(g @ g_true / (np.linalg.norm(g) * np.linalg.norm(g_true)))
        assert np.mean(cos) > 0.5

    def test_antithetic(self):
        cfg = AttackConfig("nes", epsilon=0.1, budget=100, nes_q=6)
        state = AttackState(np.full(4, 0.5), cfg, RngStream(0))
        gen = nes_proposals(state)
        state.best = next(gen)
        state.queries = 1
        probes = []
        feedback = None
        for _ in range(6):
            probes.append(gen.send(feedback) - state.best)
            feedback = (0.0, False)
        for i in range(0, 6, 2):
            np.testing.assert_allclose(probes[i + 1], -probes[i])

    def test_small_budget_no_step(self, toy):
        w, data = toy
        cfg = AttackConfig("nes", epsilon=0.1, budget=20, nes_q=20)
        tr = greedy_loop(DefendedModel(w), data.x[0], int(data.y[0]), cfg, RngStream(0))
        assert tr.queries == 1  # clean baseline only; 20 probes + step do not fit

    def test_probes_counted(self, toy):
        w, data = toy
        cfg = AttackConfig("nes", epsilon=0.1, budget=43, nes_q=20)
        tr = greedy_loop(DefendedModel(w), data.x[0], int(data.y[0]), cfg, RngStream(0))
        assert tr.queries == 43 and len(tr) == 43


class TestGreedyLoop:
    def test_budget_one(self, toy):
        w, data = toy
        for method in ("square", "simba", "signhunter", "nes"):
            cfg = AttackConfig(method, epsilon=0.1, budget=1)
            assert len(greedy_loop(DefendedModel(w), data.x[0], int(data.y[0]), cfg)) == 1

    def test_never_improves(self):
        cfg = AttackConfig("square", epsilon=0.1, budget=25)
        tr = greedy_loop(FlatModel(), np.full(6, 0.5), 0, cfg, RngStream(0), record_candidates=True)
        assert tr.accepted[0] and not any(tr.accepted[1:])
        assert all(tr.correct)

    def test_clean_mistake_skipped(self):
        tr = greedy_loop(FlatModel(), np.full(6, 0.5), 1, AttackConfig(budget=10))
        assert tr.status == "skipped" and len(tr) == 0

    def test_targeted_needs_target(self, toy):
        w, data = toy
        y = int(data.y[0])
        with pytest.raises(InvalidInputError):
            greedy_loop(DefendedModel(w), data.x[0], y, AttackConfig(targeted=True, target=y))

    @pytest.mark.parametrize("method", ["square", "simba", "signhunter", "nes"])
    @pytest.mark.parametrize("norm", ["linf", "l2"])
    def test_invariants(self, toy, method, norm):
        w, data = toy
        eps = 0.1 if norm == "linf" else 0.5
        for mode in ("none", "aaa", "rnd"):
            cfg = AttackConfig(method, norm, eps, budget=80)
            x = data.x[3]
            tr = greedy_loop(DefendedModel(w, mode), x, int(data.y[3]), cfg, RngStream(5), record_candidates=True)
            assert audit_trace(tr, x, norm, eps) == []
            acc = [d for d, a in zip(tr.defended_loss, tr.accepted) if a]
            assert all(b < a for a, b in zip(acc, acc[1:]))

    def test_audit_flags_tampering(self, toy):
        w, data = toy
        cfg = AttackConfig("square", epsilon=0.1, budget=30)
        tr = greedy_loop(DefendedModel(w), data.x[0], int(data.y[0]), cfg, RngStream(0), record_candidates=True)
        tr.accepted[5] = not tr.accepted[5]
        tr.queries += 1
        tr.candidates[2] = tr.candidates[2] + 0.5
        problems = audit_trace(tr, data.x[0], "linf", 0.1)
        kinds = {p.split(":")[0].split()[0] for p in problems}
        assert any("differs" in p for p in problems)
        assert any("query 6" in p and "strict-decrease" in p for p in problems)
        assert any("query 3" in p and "constraints" in p for p in problems)
        assert kinds <= {"trace", "query"}

    def test_deterministic(self, toy):
        w, data = toy
        cfg = AttackConfig("square", epsilon=0.1, budget=50)
        runs = [greedy_loop(DefendedModel(w, "rnd"), data.x[0], int(data.y[0]), cfg, RngStream(9)) for _ in range(2)]
        assert runs[0].defended_loss == runs[1].defended_loss

    def test_square_breaks_undefended(self, toy):
        w, data = toy
        cfg = AttackConfig("square", epsilon=0.15, budget=500)
        traces = [
            greedy_loop(DefendedModel(w), data.x[i], int(data.y[i]), cfg, RngStream(0, key=(i,))) for i in range(30)
        ]
        assert adversarial_accuracy(traces, 500) < adversarial_accuracy(traces, 0)


class TestTraceCsv:
    def test_roundtrip(self, toy, tmp_path):
        w, data = toy
        cfg = AttackConfig("square", epsilon=0.1, budget=20)
        tr = greedy_loop(DefendedModel(w), data.x[0], int(data.y[0]), cfg)
        tr.write_csv(tmp_path / "t.csv")
        back = AttackTrace.read_csv(tmp_path / "t.csv", 20)
        assert back.defended_loss == tr.defended_loss and back.correct == tr.correct
        assert back.first_success == tr.first_success

    def test_malformed(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("query,defended_loss\n1,2\n")
        with pytest.raises(InvalidInputError):
            AttackTrace.read_csv(p, 5)


def test_amplitude_l2():
    cfg = AttackConfig(norm="l2", epsilon=2.0)
    assert AttackState(np.zeros(16), cfg, RngStream(0)).amplitude == pytest.approx(2.0 / math.sqrt(16))
