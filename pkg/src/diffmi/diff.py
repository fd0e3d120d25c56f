"""Differential comparison: single- and bi-directional sweeps over an MMD state.

A sample is judged a nonmember when moving it from the target side to the
nonmember side does not shrink the kernel distance between the two sides.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from diffmi.data import AttackConfig, MembershipPrediction, ProbeDataset
from diffmi.errors import ValidationError
from diffmi.kernels import KernelSpec, MmdState
from diffmi.projection import project_many

logger = logging.getLogger(__name__)


@dataclass
class DiffOutcome:
    pred_member_ids: list
    pred_nonmember_ids: list
    iterations: int
    moves_attempted: int
    moves_committed: int
    wall_time: float
    final_distance: float
    # (iteration, distance after the iteration, moves committed in it); iteration 0 is the start
    trajectory: list = field(default_factory=list)
    # (reference distance, distance after the move) for every committed move
    audit: list = field(default_factory=list)
    sigma: Optional[float] = None


def _as_set(X, name) -> np.ndarray:
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] == 0:
        raise ValidationError(f"{name} must be a non-empty (n, k) array, got shape {A.shape}")
    return A


def _ids_for(ids, n, name) -> list:
    if ids is None:
        return list(range(n))
    ids = list(ids)
    if len(ids) != n:
        raise ValidationError(f"{name}: {len(ids)} ids for {n} vectors")
    return ids


def diff_single(
    nonmem,
    target,
    kernel: KernelSpec,
    tol: float = 0.0,
    max_iter: int = 1000,
    target_ids: Optional[Sequence] = None,
    grow_nonmem: bool = False,
) -> DiffOutcome:
    """Single-directional comparison of a target set against a nonmember set.

    Each iteration freezes ``d = D(nonmem, target)`` and sweeps the target
    in ascending id order. A candidate ``y`` whose hypothetical move gives
    ``D(nonmem + {y}, target - {y}) >= d + tol`` is marked nonmember;
    marked samples leave the target when the sweep ends and the next
    iteration starts from the smaller target. The nonmember set itself is
    left unchanged unless ``grow_nonmem`` is set, in which case each marked
    sample joins it immediately. Moves that would empty the target are not
    attempted. Whatever remains on the target side is predicted member.
    """
    N = _as_set(nonmem, "nonmem")
    T = _as_set(target, "target")
    if N.shape[1] != T.shape[1]:
        raise ValidationError(f"dimension mismatch: nonmem {N.shape[1]} vs target {T.shape[1]}")
    if tol < 0:
        raise ValidationError("tol must be non-negative")
    n_t, n_n = len(T), len(N)
    ids = _ids_for(target_ids, n_t, "target_ids")
    start = time.perf_counter()

    state = MmdState(np.vstack([T, N]), kernel, np.r_[np.ones(n_t), np.zeros(n_n)], np.r_[np.zeros(n_t), np.ones(n_n)])
    order = sorted(range(n_t), key=lambda i: ids[i])
    active = set(range(n_t))
    trajectory = [(0, state.distance(), 0)]
    audit = []
    attempted = committed = iterations = 0
    emptied = False

    while True:
        iterations += 1
        d = state.distance()
        marked = []
        if len(active) >= 2:
            for i in order:
                if i not in active:
                    continue
                attempted += 1
                d_after = state.distance_after_move(i, to_y=True)
                if d_after >= d + tol:
                    marked.append(i)
                    audit.append((d, d_after))
                    if grow_nonmem:
                        state.add_y(i)
        committed += len(marked)
        if marked and len(marked) == len(active):
            active.clear()
            emptied = True
            trajectory.append((iterations, float("nan"), len(marked)))
            break
        for i in marked:
            state.remove_x(i)
            active.discard(i)
        trajectory.append((iterations, state.distance(), len(marked)))
        if not marked or iterations >= max_iter:
            break

    members = [ids[i] for i in order if i in active]
    nonmembers = [ids[i] for i in order if i not in active]
    return DiffOutcome(
        pred_member_ids=members,
        pred_nonmember_ids=nonmembers,
        iterations=iterations,
        moves_attempted=attempted,
        moves_committed=committed,
        wall_time=time.perf_counter() - start,
        final_distance=float("nan") if emptied else state.distance(),
        trajectory=trajectory,
        audit=audit,
        sigma=state.spec.sigma,
    )


def decide_member_side(setA, setB) -> str:
    """``"A"`` or ``"B"``: the side whose mean top-1 score is strictly higher.

    Relies on the first projected coordinate being the largest probability.
    An exact tie goes to A with a warning.
    """
    a = float(np.mean(np.asarray(setA, dtype=np.float64)[:, 0]))
    b = float(np.mean(np.asarray(setB, dtype=np.float64)[:, 0]))
    if a > b:
        return "A"
    if b > a:
        return "B"
    logger.warning("member-side decision tied at mean confidence %.6g; choosing side A", a)
    return "A"


def diff_bi(
    part1,
    part2,
    kernel: KernelSpec,
    tol: float = 0.0,
    max_iter: int = 1000,
    ids1: Optional[Sequence] = None,
    ids2: Optional[Sequence] = None,
) -> DiffOutcome:
    """Bi-directional comparison between two rough halves of a target set.

    Each iteration sweeps part1 -> part2 and then part2 -> part1 (both in
    ascending id order over the side's contents when its sweep starts),
    committing any move with ``d' >= d + tol`` and raising ``d`` to ``d'``.
    Moves that would empty a side are skipped. At convergence the side
    with the higher mean top-1 score is the member side.
    """
    A = _as_set(part1, "part1")
    B = _as_set(part2, "part2")
    if A.shape[1] != B.shape[1]:
        raise ValidationError(f"dimension mismatch: part1 {A.shape[1]} vs part2 {B.shape[1]}")
    if tol < 0:
        raise ValidationError("tol must be non-negative")
    na, nb = len(A), len(B)
    # default ids number part2 after part1
    ids2 = range(na, na + nb) if ids2 is None else ids2
    ids = _ids_for(ids1, na, "ids1") + _ids_for(ids2, nb, "ids2")
    if len(set(ids)) != len(ids):
        raise ValidationError("ids of part1 and part2 must be distinct")
    start = time.perf_counter()

    pool = np.vstack([A, B])
    state = MmdState(pool, kernel, np.r_[np.ones(na), np.zeros(nb)], np.r_[np.zeros(na), np.ones(nb)])
    in_part1 = np.r_[np.ones(na, dtype=bool), np.zeros(nb, dtype=bool)]
    rank = sorted(range(na + nb), key=lambda p: ids[p])
    trajectory = [(0, state.distance(), 0)]
    audit = []
    attempted = committed = iterations = 0

    while True:
        iterations += 1
        d = state.distance()
        moved = 0
        for forward in (True, False):
            candidates = [p for p in rank if in_part1[p] == forward]
            for p in candidates:
                src_size = state.n_t if forward else state.n_n
                if src_size < 2:
                    continue
                attempted += 1
                d_after = state.distance_after_move(p, to_y=forward)
                if d_after >= d + tol:
                    state.move(p, to_y=forward)
                    in_part1[p] = not forward
                    audit.append((d, d_after))
                    d = d_after
                    moved += 1
        committed += moved
        trajectory.append((iterations, d, moved))
        if moved == 0 or iterations >= max_iter:
            break

    side1 = [p for p in rank if in_part1[p]]
    side2 = [p for p in rank if not in_part1[p]]
    if decide_member_side(pool[side1], pool[side2]) == "A":
        members, nonmembers = side1, side2
    else:
        members, nonmembers = side2, side1
    return DiffOutcome(
        pred_member_ids=[ids[p] for p in members],
        pred_nonmember_ids=[ids[p] for p in nonmembers],
        iterations=iterations,
        moves_attempted=attempted,
        moves_committed=committed,
        wall_time=time.perf_counter() - start,
        final_distance=state.distance(),
        trajectory=trajectory,
        audit=audit,
        sigma=state.spec.sigma,
    )


def split_batches(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Consecutive ``[start, stop)`` ranges; a trailing batch under 2 joins the previous one."""
    if n < 2:
        raise ValidationError(f"need at least 2 target records, got {n}")
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


@dataclass
class BatchedRun:
    predictions: list
    outcomes: list
    variant: str

    def convergence_rows(self) -> list[tuple]:
        """``(batch, iteration, distance, moves_committed)`` for every logged iteration."""
        return [
            (b, it, dist, moves)
            for b, outcome in enumerate(self.outcomes)
            for it, dist, moves in outcome.trajectory
        ]


def _run_one_batch(job):
    (variant, ids, feats, nonmem_feats, batch_probs, config, separation) = job
    if variant == "diff-w/":
        return diff_single(
            nonmem_feats, feats, config.kernel, config.move_tolerance, config.max_iterations, target_ids=ids
        )
    from diffmi.nonmember import separate_projected

    pseudo_nonmem, pseudo_target = separate_projected(ids, batch_probs, feats, separation)
    pos = {i: j for j, i in enumerate(ids)}
    tgt = [pos[i] for i in pseudo_target]
    non = [pos[i] for i in pseudo_nonmem]
    return diff_bi(
        feats[tgt], feats[non], config.kernel, config.move_tolerance, config.max_iterations,
        ids1=pseudo_target, ids2=pseudo_nonmem,
    )


def resolve_attack_kernel(target: ProbeDataset, nonmem: Optional[ProbeDataset], config: AttackConfig) -> AttackConfig:
    """Fix an unset bandwidth over the projected target and nonmember sets.

    Batch mode does this once per attack. Pass the result to
    :func:`attack_incremental` so single-record verdicts use the same kernel.
    """
    if not config.kernel.needs_sigma:
        return config
    need = config.projection.needs_true_label
    parts = [project_many(target.probs_matrix(), target.true_labels() if need else None, config.projection)]
    if nonmem is not None and len(nonmem) and config.variant == "diff-w/":
        parts.append(project_many(nonmem.probs_matrix(), nonmem.true_labels() if need else None, config.projection))
    return replace(config, kernel=config.kernel.resolve(np.vstack(parts)))


def run_batches(
    target: ProbeDataset,
    nonmem: Optional[ProbeDataset],
    config: AttackConfig,
    separation=None,
    jobs: int = 1,
) -> BatchedRun:
    """Run diff-w/ or diff-w/o batch by batch and keep every batch's outcome."""
    from diffmi.nonmember import SeparationSpec

    if config.variant not in ("diff-w/", "diff-w/o"):
        raise ValidationError(f"run_batches handles diff-w/ and diff-w/o, not {config.variant!r}")
    target = target.blind()
    P = target.probs_matrix()
    labels = target.true_labels() if config.projection.needs_true_label else None
    feats = project_many(P, labels, config.projection)
    ids = target.ids

    nonmem_feats = None
    if config.variant == "diff-w/":
        if nonmem is None or len(nonmem) == 0:
            raise ValidationError("diff-w/ needs a generated nonmember set")
        nonmem = nonmem.blind()
        nl = nonmem.true_labels() if config.projection.needs_true_label else None
        nonmem_feats = project_many(nonmem.probs_matrix(), nl, config.projection)
    elif separation is None:
        separation = SeparationSpec()
    if config.kernel.needs_sigma:
        # one bandwidth for the whole attack, not one per batch
        pooled = feats if nonmem_feats is None else np.vstack([feats, nonmem_feats])
        config = replace(config, kernel=config.kernel.resolve(pooled))

    jobs_list = [
        (config.variant, ids[s:e], feats[s:e], nonmem_feats, P[s:e], config, separation)
        for s, e in split_batches(len(target), config.batch_size)
    ]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one_batch, jobs_list))
    else:
        outcomes = [_run_one_batch(j) for j in jobs_list]

    verdict = {}
    for b, outcome in enumerate(outcomes):
        meta = {"batch": b, "iterations": outcome.iterations, "moves": outcome.moves_committed}
        for i in outcome.pred_member_ids:
            verdict[i] = (True, meta)
        for i in outcome.pred_nonmember_ids:
            verdict[i] = (False, meta)
    preds = [MembershipPrediction(i, verdict[i][0], config.variant, verdict[i][1]) for i in ids]
    return BatchedRun(preds, outcomes, config.variant)


def attack_batched(
    target: ProbeDataset,
    nonmem: Optional[ProbeDataset],
    config: AttackConfig,
    separation=None,
    jobs: int = 1,
) -> list[MembershipPrediction]:
    """Predictions for every target record, in target order.

    ``1class`` is dispatched to the one-class attack (batching does not
    apply to it); the two differential variants run per batch.
    """
    if config.variant == "1class":
        from diffmi.oneclass import oneclass_attack

        if nonmem is None or len(nonmem) == 0:
            raise ValidationError("1class needs a generated nonmember set")
        return oneclass_attack(target, nonmem, config)
    return run_batches(target, nonmem, config, separation, jobs).predictions


def attack_incremental(
    record_id: str,
    previous_batch: ProbeDataset,
    pool: ProbeDataset,
    nonmem: Optional[ProbeDataset],
    config: AttackConfig,
    separation=None,
) -> MembershipPrediction:
    """Verdict for one new record appended to an already processed batch.

    Re-runs the batch attack on ``previous_batch ∪ {record}`` as a single
    batch, so the verdict equals the batch-mode verdict for that composition.
    """
    wanted = set(previous_batch.ids) | {record_id}
    if wanted <= set(pool.ids):
        # keep the pool's record order so the batch is the one batch mode sees
        batch = pool.subset([i for i in pool.ids if i in wanted])
    elif record_id in previous_batch.ids:
        batch = previous_batch
    else:
        batch = previous_batch.concat(pool.subset([record_id]))
    single = AttackConfig(
        projection=config.projection,
        kernel=config.kernel,
        batch_size=max(len(batch), 2),
        mode="batch",
        variant=config.variant,
        move_tolerance=config.move_tolerance,
        max_iterations=config.max_iterations,
    )
    preds = attack_batched(batch, nonmem, single, separation)
    for p in preds:
        if p.id == record_id:
            return MembershipPrediction(p.id, p.predicted_member, p.variant, {**p.meta, "mode": "incremental"})
    raise ValidationError(f"record {record_id!r} not found")
