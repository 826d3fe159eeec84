"""Score-based query attacks driven by one greedy acceptance loop.

Each method is a proposal generator. The loop constrains every proposal
(box, norm ball, 8-bit grid), queries the defended model, and accepts it only
if the defended attack loss is strictly lower than the current best. The
generator receives ``(defended_loss, accepted)`` for each query it yields.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from aaalab.defense import DefendedModel
from aaalab.model import quantize8
from aaalab.numkit import InvalidInputError, RngStream

METHODS = ("square", "simba", "signhunter", "nes")
NORMS = ("linf", "l2")
LOSS_KINDS = ("logit-margin", "prob-margin", "cross-entropy")
TRACE_HEADER = ["query", "defended_loss", "oracle_loss", "accepted", "correct"]

_GRID_TOL = 1e-9
_BALL_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    method: str = "square"
    norm: str = "linf"
    epsilon: float = 0.1
    budget: int = 500
    targeted: bool = False
    target: int | None = None
    loss_kind: str = "logit-margin"
    seed: int = 0
    square_p: float = 0.05
    simba_step: float | None = None  # defaults to epsilon
    nes_delta: float = 0.01
    nes_lr: float = 0.02
    nes_q: int = 20

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown attack method {self.method!r}")
        if self.norm not in NORMS:
            raise InvalidInputError(f"unknown norm {self.norm!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss kind {self.loss_kind!r}")
        if not self.epsilon > 0 or self.budget < 1:
            raise InvalidInputError("epsilon must be positive and budget >= 1")
        if not 0 < self.square_p <= 1:
            raise InvalidInputError("square_p must lie in (0, 1]")
        if self.nes_q < 2 or self.nes_delta <= 0 or self.nes_lr <= 0:
            raise InvalidInputError("NES needs q >= 2 and positive delta/lr")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max()
    return s - math.log(np.exp(s).sum())


def attack_loss(z, y: int, kind: str = "logit-margin", targeted: bool = False, target=None) -> float:
    """Loss the attacker drives down; below zero means the attack succeeded.

    ``logit-margin`` is ``z_y - max_{k!=y} z_k``, ``prob-margin`` the same on
    softmax probabilities, ``cross-entropy`` is ``log p_y`` (negated CE).
    In targeted mode with target ``c`` the margins become
    ``max_{k!=c} s_k - s_c`` and cross-entropy becomes ``-log p_c``.
    """
    z = np.asarray(z, dtype=np.float64)
    k = z.size
    cls = target if targeted else y
    if cls is None or not 0 <= int(cls) < k or not 0 <= int(y) < k:
        raise InvalidInputError("class index out of range")
    cls = int(cls)
    if kind == "cross-entropy":
        lp = _log_softmax(z)[cls]
        return float(-lp if targeted else lp)
    if kind == "prob-margin":
        e = np.exp(z - z.max())
        s = e / e.sum()
    elif kind == "logit-margin":
        s = z
    else:
        raise InvalidInputError(f"unknown loss kind {kind!r}")
    other = max(s[j] for j in range(k) if j != cls)
    return float(other - s[cls] if targeted else s[cls] - other)


def project(delta, norm: str, eps: float, clean=None) -> np.ndarray:
    """Project a perturbation onto the norm ball, then (optionally) the box."""
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        out = np.clip(delta, -eps, eps)
    elif norm == "l2":
        nrm = float(np.linalg.norm(delta))
        out = delta * (eps / nrm) if nrm > eps else delta.copy()
    else:
        raise InvalidInputError(f"unknown norm {norm!r}")
    if clean is not None:
        clean = np.asarray(clean, dtype=np.float64)
        out = np.clip(clean + out, 0.0, 1.0) - clean
    return out


def _toward(clean_k: np.ndarray, v_k: np.ndarray) -> np.ndarray:
    return np.where(v_k >= clean_k, np.floor(v_k + _GRID_TOL), np.ceil(v_k - _GRID_TOL))


def constrain(candidate, clean, norm: str, eps: float) -> np.ndarray:
    """Map a raw proposal to a queryable point: ball, box, then 8-bit grid.

    ``clean`` must sit on the grid. Coordinates whose half-up rounding would
    leave the ball are rounded toward the clean value instead, so the result
    stays feasible.
    """
    clean = np.asarray(clean, dtype=np.float64)
    delta = project(np.asarray(candidate, dtype=np.float64) - clean, norm, eps, clean)
    v = np.clip(clean + delta, 0.0, 1.0)
    q = quantize8(v)
    dq = q - clean
    if norm == "linf":
        bad = np.abs(dq) > eps + _BALL_TOL
        if np.any(bad):
            ck, vk = np.rint(clean * 255.0), v * 255.0
            q = np.where(bad, _toward(ck, vk) / 255.0, q)
    elif np.linalg.norm(dq) > eps + _BALL_TOL:
        q = _toward(np.rint(clean * 255.0), v * 255.0) / 255.0
    return q


def in_threat_model(candidate, clean, norm: str, eps: float) -> bool:
    c = np.asarray(candidate, dtype=np.float64)
    d = c - np.asarray(clean, dtype=np.float64)
    size = np.max(np.abs(d)) if norm == "linf" else np.linalg.norm(d)
    on_grid = np.all(np.abs(c * 255.0 - np.rint(c * 255.0)) < 1e-6)
    return bool(size <= eps + _BALL_TOL and np.all(c >= 0) and np.all(c <= 1) and on_grid)


@dataclass
class AttackTrace:
    budget: int
    clean_correct: bool
    defended_loss: list = field(default_factory=list)
    oracle_loss: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    correct: list = field(default_factory=list)
    queries: int = 0
    candidates: list | None = None

    def __len__(self) -> int:
        return len(self.accepted)

    @property
    def first_success(self) -> int | None:
        """1-based query index at which the best candidate first broke, if ever."""
        for i, ok in enumerate(self.correct):
            if not ok:
                return i + 1
        return None

    @property
    def status(self) -> str:
        if not self.clean_correct:
            return "skipped"
        return "success" if self.first_success is not None else "failed"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for i in range(len(self)):
                w.writerow(
                    [
                        i + 1,
                        repr(float(self.defended_loss[i])),
                        repr(float(self.oracle_loss[i])),
                        int(self.accepted[i]),
                        int(self.correct[i]),
                    ]
                )

    @classmethod
    def read_csv(cls, path, budget: int) -> "AttackTrace":
        """Load a trace file; an empty body marks a clean-misclassified sample."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != TRACE_HEADER:
            raise InvalidInputError(f"{path}: bad trace header")
        tr = cls(budget=budget, clean_correct=len(rows) > 1)
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != 5 or int(row[0]) != lineno - 1:
                raise InvalidInputError(f"{path}:{lineno}: malformed trace row")
            tr.defended_loss.append(float(row[1]))
            tr.oracle_loss.append(float(row[2]))
            tr.accepted.append(row[3] == "1")
            tr.correct.append(row[4] == "1")
        tr.queries = len(tr.accepted)
        return tr


class AttackState:
    """Mutable per-run state shared by the loop and the proposal generator."""

    def __init__(self, clean, cfg: AttackConfig, rng: RngStream):
        self.clean = np.asarray(clean, dtype=np.float64)
        self.cfg = cfg
        self.rng = rng
        self.best: np.ndarray | None = None
        self.best_loss = math.inf
        self.queries = 0

    @property
    def dim(self) -> int:
        return self.clean.size

    @property
    def remaining(self) -> int:
        return self.cfg.budget - self.queries

    @property
    def amplitude(self) -> float:
        """Per-coordinate size of sign perturbations (on the l2 sphere for l2)."""
        eps = self.cfg.epsilon
        return eps if self.cfg.norm == "linf" else eps / math.sqrt(self.dim)

    def constrain(self, candidate) -> np.ndarray:
        return constrain(candidate, self.clean, self.cfg.norm, self.cfg.epsilon)


Proposals = Iterator[np.ndarray]


# ---------------------------------------------------------------- Square


def square_fraction(p_init: float, it: int) -> float:
    """Share of coordinates flipped at iteration ``it`` (halving schedule)."""
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def square_window(p_init: float, it: int, dim: int) -> int:
    return int(min(dim, max(1, math.ceil(square_fraction(p_init, it) * dim - 1e-12))))


def square_proposals(state: AttackState) -> Proposals:
    """Random-search over contiguous windows set to +-amplitude.

    Starts from a random per-coordinate sign pattern (the 1-D analogue of
    vertical stripes); each later proposal overwrites one window of the
    current best perturbation with a single random sign.
    """
    x, rng, a = state.clean, state.rng, state.amplitude
    yield x + a * rng.choice_sign(state.dim)
    it = 0
    while True:
        s = square_window(state.cfg.square_p, it, state.dim)
        start = int(rng.integers(0, state.dim - s + 1))
        sign = float(rng.choice_sign(1)[0])
        delta = state.best - x
        cand = x + delta
        cand[start : start + s] = x[start : start + s] + sign * a
        if np.array_equal(state.constrain(cand), state.best):
            cand[start : start + s] = x[start : start + s] - sign * a
        yield cand
        it += 1


# ---------------------------------------------------------------- SimBA


def simba_proposals(state: AttackState) -> Proposals:
    """Coordinate descent in a random order without replacement.

    Tries ``+step`` on a fresh coordinate, then ``-step`` if that was
    rejected. Proposals that the constraints would map back onto the current
    best are skipped without spending a query; a full pass with nothing to
    try ends the attack.
    """
    step = state.cfg.simba_step if state.cfg.simba_step is not None else state.cfg.epsilon
    yield state.clean.copy()
    while True:
        tried = False
        for i in state.rng.permutation(state.dim):
            for sgn in (1.0, -1.0):
                cand = state.best.copy()
                cand[i] += sgn * step
                if np.array_equal(state.constrain(cand), state.best):
                    continue
                tried = True
                _, accepted = yield cand
                if accepted:
                    break
        if not tried:
            return


# ---------------------------------------------------------------- SignHunter


def signhunter_chunks(dim: int) -> Iterator[tuple[int, int]]:
    """Breadth-first ``(lo, hi)`` chunk order: whole, halves, quarters, ... singles."""
    h = 0
    while True:
        size = math.ceil(dim / 2**h)
        for lo in range(0, dim, size):
            yield lo, min(lo + size, dim)
        h = 0 if size == 1 else h + 1


def signhunter_proposals(state: AttackState) -> Proposals:
    x, a = state.clean, state.amplitude
    signs = np.ones(state.dim)
    yield x + a * signs
    for lo, hi in signhunter_chunks(state.dim):
        trial = signs.copy()
        trial[lo:hi] *= -1.0
        _, accepted = yield x + a * trial
        if accepted:
            signs = trial


# ---------------------------------------------------------------- NES


def nes_combine(probes: np.ndarray, plus: np.ndarray, minus: np.ndarray, delta: float) -> np.ndarray:
    """Antithetic score-weighted gradient estimate."""
    w = (np.asarray(plus) - np.asarray(minus)) / (2.0 * delta * len(probes))
    return w @ probes


def nes_gradient(loss_fn: Callable, center, delta: float, q: int, rng: RngStream) -> np.ndarray:
    """Stand-alone NES estimate with ``q`` (antithetic) evaluations of ``loss_fn``."""
    center = np.asarray(center, dtype=np.float64)
    probes = rng.normal((q // 2, center.size))
    plus = np.array([loss_fn(center + delta * u) for u in probes])
    minus = np.array([loss_fn(center - delta * u) for u in probes])
    return nes_combine(probes, plus, minus, delta)


def nes_proposals(state: AttackState) -> Proposals:
    """Finite-difference gradient steps.

    Each round spends ``2 * (q // 2)`` queries on antithetic Gaussian probes
    around the current best, then proposes one signed step (normalised step
    under l2). A round is only started when the whole batch plus the step
    fits in the remaining budget.
    """
    cfg = state.cfg
    half = cfg.nes_q // 2
    yield state.clean.copy()
    while state.remaining >= 2 * half + 1:
        center = state.best.copy()
        probes = state.rng.normal((half, state.dim))
        plus, minus = np.empty(half), np.empty(half)
        for i, u in enumerate(probes):
            plus[i], _ = yield center + cfg.nes_delta * u
            minus[i], _ = yield center - cfg.nes_delta * u
        g = nes_combine(probes, plus, minus, cfg.nes_delta)
        if cfg.norm == "linf":
            step = np.sign(g)
        else:
            nrm = np.linalg.norm(g)
            step = g / nrm if nrm > 0 else g
        yield state.best - cfg.nes_lr * step


PROPOSERS = {
    "square": square_proposals,
    "simba": simba_proposals,
    "signhunter": signhunter_proposals,
    "nes": nes_proposals,
}


# ---------------------------------------------------------------- loop


def _is_correct(z: np.ndarray, y: int, cfg: AttackConfig) -> bool:
    pred = int(np.argmax(z))
    return pred != cfg.target if cfg.targeted else pred == y


def greedy_loop(
    model: DefendedModel,
    x,
    y: int,
    cfg: AttackConfig,
    rng: RngStream | None = None,
    record_candidates: bool = False,
) -> AttackTrace:
    """Run one attack on one sample until the budget (or the method) runs out.

    The attacker sees only the defended loss. The undefended model's loss and
    whether it still classifies the current best correctly are logged per
    query for evaluation.
    """
    if cfg.targeted and (cfg.target is None or cfg.target == y):
        raise InvalidInputError("targeted attack needs a target class different from the label")
    rng = rng if rng is not None else RngStream(cfg.seed)
    attack_rng, defense_rng = rng.child(0), rng.child(1)
    clean = quantize8(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0))
    clean_ok = int(np.argmax(model.oracle_logits(clean))) == y
    trace = AttackTrace(budget=cfg.budget, clean_correct=clean_ok)
    if record_candidates:
        trace.candidates = []
    if not clean_ok:
        return trace

    state = AttackState(clean, cfg, attack_rng)
    gen = PROPOSERS[cfg.method](state)
    feedback = None
    best_correct = True
    loss_args = (cfg.loss_kind, cfg.targeted, cfg.target)
    while state.queries < cfg.budget:
        try:
            raw = gen.send(feedback)
        except StopIteration:
            break
        cand = state.constrain(raw)
        z_def, z_orc = model.query(cand, defense_rng)
        d = attack_loss(z_def, y, *loss_args)
        o = attack_loss(z_orc, y, *loss_args)
        state.queries += 1
        accepted = d < state.best_loss
        if accepted:
            state.best, state.best_loss = cand, d
            best_correct = _is_correct(z_orc, y, cfg)
        trace.defended_loss.append(d)
        trace.oracle_loss.append(o)
        trace.accepted.append(bool(accepted))
        trace.correct.append(best_correct)
        if record_candidates:
            trace.candidates.append(cand)
        feedback = (d, accepted)
    gen.close()
    trace.queries = state.queries
    return trace


def audit_trace(trace: AttackTrace, clean=None, norm: str | None = None, eps: float | None = None) -> list[str]:
    """Check loop invariants on a finished trace; returns a list of violations."""
    problems = []
    n = len(trace)
    if n > trace.budget:
        problems.append(f"trace length {n} exceeds budget {trace.budget}")
    if trace.queries != n:
        problems.append(f"trace length {n} differs from queries consumed {trace.queries}")
    if not trace.clean_correct and n:
        problems.append("clean-misclassified sample was queried")
    columns = (trace.defended_loss, trace.oracle_loss, trace.accepted, trace.correct)
    if any(len(c) != n for c in columns):
        problems.append("trace columns have different lengths")
        return problems
    best = math.inf
    for i, (d, acc) in enumerate(zip(trace.defended_loss, trace.accepted)):
        if acc != (d < best):
            problems.append(f"query {i + 1}: accepted={acc} contradicts strict-decrease rule")
        if acc:
            best = d
    if trace.candidates is not None and clean is not None:
        clean_q = np.asarray(clean, dtype=np.float64)
        for i, c in enumerate(trace.candidates):
            if not in_threat_model(c, clean_q, norm, eps):
                problems.append(f"query {i + 1}: candidate violates ball/box/grid constraints")
    return problems
