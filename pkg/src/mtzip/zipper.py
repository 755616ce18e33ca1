"""Layer-wise neuron sharing between pre-trained networks.

Merging unit ``i`` of one side with unit ``j`` of the other replaces both by a
single unit whose incoming weights over the shared inputs are

    f = (H_A + H_B)^-1 (H_A w_A + H_B w_B),

the minimizer of ``1/2 da^T H_A da + 1/2 db^T H_B db`` subject to
``w_A + da = w_B + db``. The cost of that merge is the functional difference

    d = 1/2 (w_A - w_B)^T (H_A^-1 + H_B^-1)^-1 (w_A - w_B).

Both are evaluated through ``(H_A^-1 + H_B^-1)^-1 = H_A (H_A + H_B)^-1 H_B`` so
only the sum ``H_A + H_B`` is ever factorized. Layers are zipped bottom-up;
after each layer the joint model can be retrained before the next layer's
Hessians are estimated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .hessian import CalibrationSet, HessianEstimate, merge_hessians, task_hessian
from .linalg import Permutation, SpdMatrix, ensure_factorizable, spd_solve
from .model import Network, ZippedModel, expand_units, predict, zip_without_sharing
from .trainer import RetrainSchedule, TrainConfig, retrain_joint

SHARE_MODES = ("full", "none", "counts", "thresholds")
POLICIES = ("greedy", "exhaustive")


class PlanError(ValueError):
    """Invalid or infeasible merge plan."""


class ZipError(RuntimeError):
    def __init__(self, layer: int, cause: Exception):
        super().__init__(f"layer {layer}: {cause}")
        self.layer = layer
        self.cause = cause


@dataclass
class MergePlan:
    """Per-layer sharing targets plus the knobs of the merge.

    ``share`` selects how targets are read: ``full`` shares as many units as
    possible, ``none`` shares nothing, ``counts`` and ``thresholds`` use the
    per-hidden-layer lists. When both lists are given the threshold decides
    and falling short of the count is an error. ``alpha`` weights the first
    side's layer error (``None``: 0.5 for two models, ``k/(k+1)`` when adding to
    ``k`` zipped tasks).
    """

    share: str = "full"
    counts: list | None = None
    thresholds: list | None = None
    alpha: float | None = None
    retrain: RetrainSchedule = field(default_factory=RetrainSchedule)
    policy: str = "greedy"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=0))

    def __post_init__(self):
        if self.share not in SHARE_MODES:
            raise PlanError(f"share must be one of {SHARE_MODES}, got {self.share!r}")
        if self.policy not in POLICIES:
            raise PlanError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise PlanError("alpha must lie strictly between 0 and 1")
        if self.share == "counts" and self.counts is None:
            raise PlanError("share=counts needs per-layer counts")
        if self.share == "thresholds" and self.thresholds is None:
            raise PlanError("share=thresholds needs per-layer thresholds")
        if self.counts is not None and any(c < 0 for c in self.counts):
            raise PlanError("shared counts must be nonnegative")
        if self.thresholds is not None and any(not e >= 0 for e in self.thresholds):
            raise PlanError("thresholds must be nonnegative")
        if isinstance(self.retrain, (list, tuple)):
            self.retrain = RetrainSchedule(list(self.retrain))

    def check_depth(self, n_hidden: int) -> None:
        for name in ("counts", "thresholds"):
            values = getattr(self, name)
            if values is not None and self.share in ("counts", "thresholds") and len(values) != n_hidden:
                raise PlanError(f"{name} has {len(values)} entries, the models have {n_hidden} hidden layers")

    def target(self, k: int):
        """``(count, threshold)`` for hidden layer ``k`` (0-based); count None means as many as possible."""
        if self.share == "none":
            return 0, None
        if self.share == "full":
            return None, None
        count = self.counts[k] if self.counts is not None else None
        threshold = self.thresholds[k] if self.thresholds is not None else None
        return count, threshold


class PairScore(NamedTuple):
    i: int
    j: int
    d: float
    merged_weight: np.ndarray


# ---------------------------------------------------------------------------
# merge math


def _as_spd(h) -> SpdMatrix:
    if isinstance(h, HessianEstimate):
        return h.matrix
    if isinstance(h, SpdMatrix):
        return h
    return SpdMatrix(h)


def _factors(ha, hb):
    a = ensure_factorizable(_as_spd(ha))
    b = ensure_factorizable(_as_spd(hb))
    if a.dim != b.dim:
        raise ValueError(f"Hessian dimension mismatch: {a.dim} vs {b.dim}")
    return a.damped_entries(), b.damped_entries(), a + b


def _check_vectors(wa, wb, dim):
    wa = np.asarray(wa, dtype=np.float64)
    wb = np.asarray(wb, dtype=np.float64)
    if wa.shape != wb.shape or wa.shape[0] != dim:
        raise ValueError(f"weight shapes {wa.shape} and {wb.shape} do not match Hessian dim {dim}")
    return wa, wb


def functional_difference(wA, wB, HA, HB) -> float:
    """Least increase of the weighted layer error caused by merging the two weight vectors."""
    a, b, s = _factors(HA, HB)
    wa, wb = _check_vectors(wA, wB, s.dim)
    delta = wa - wb
    d = 0.5 * float((a @ delta) @ spd_solve(s, b @ delta))
    return max(d, 0.0)


def optimal_updates(wA, wB, HA, HB):
    """Optimal changes ``(dA, dB)`` and the common merged vector ``wA + dA = wB + dB``."""
    a, b, s = _factors(HA, HB)
    wa, wb = _check_vectors(wA, wB, s.dim)
    d_a = spd_solve(s, b @ (wb - wa))
    d_b = spd_solve(s, a @ (wa - wb))
    merged = spd_solve(s, a @ wa + b @ wb)
    return d_a, d_b, merged


def update_cost(d_a, d_b, HA, HB) -> float:
    """``1/2 dA^T H_A dA + 1/2 dB^T H_B dB`` on the damped Hessians."""
    a, b, _ = _factors(HA, HB)
    return 0.5 * float(d_a @ a @ d_a + d_b @ b @ d_b)


def pair_scores(WA, WB, HA, HB) -> np.ndarray:
    """Functional difference of every column of ``WA`` against every column of ``WB``."""
    a, b, s = _factors(HA, HB)
    s = ensure_factorizable(s)
    m = a @ scipy.linalg.cho_solve(s.cholesky(), b, check_finite=False)
    m = 0.5 * (m + m.T)
    ma, mb = m @ WA, m @ WB
    qa = np.einsum("ij,ij->j", WA, ma)
    qb = np.einsum("ij,ij->j", WB, mb)
    d = 0.5 * (qa[:, None] + qb[None, :] - 2.0 * (WA.T @ mb))
    return np.maximum(d, 0.0)


def merged_weights(WA, WB, HA, HB) -> np.ndarray:
    """Merged vector for column pairs ``(WA[:, k], WB[:, k])``."""
    a, b, s = _factors(HA, HB)
    return spd_solve(s, a @ WA + b @ WB)


def merge_sparse(wA, wB, maskA, maskB, HA, HB):
    """Merge two sparse weight vectors; the merged mask is the denser of the two.

    Ties in the number of ones fall back to the elementwise OR of both masks.
    """
    ma = np.asarray(maskA).astype(bool)
    mb = np.asarray(maskB).astype(bool)
    wa, wb = _check_vectors(wA, wB, ma.size)
    if ma.shape != wa.shape or mb.shape != wb.shape:
        raise ValueError("mask shapes must match the weights")
    if np.any(wa[~ma] != 0) or np.any(wb[~mb] != 0):
        raise ValueError("weights must be zero where their mask is 0")
    na, nb = int(ma.sum()), int(mb.sum())
    mask = ma if na > nb else mb if nb > na else ma | mb
    merged = optimal_updates(wa, wb, HA, HB)[2]
    return merged * mask, mask.copy()


# ---------------------------------------------------------------------------
# pair selection


def _assignment(cost: np.ndarray, k: int) -> list:
    """Minimum-cost matching of exactly ``k`` disjoint pairs (inf entries forbidden)."""
    n, m = cost.shape
    if k == 0:
        return []
    size = n + m - k
    big = np.full((size, size), np.inf)
    big[:n, :m] = cost
    big[:n, m:] = 0.0  # row left unmatched
    big[n:, :m] = 0.0  # column left unmatched
    try:
        rows, cols = linear_sum_assignment(big)
    except ValueError:
        raise PlanError(f"no matching of {k} admissible pairs exists") from None
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if r < n and c < m]
    if len(pairs) != k:
        raise PlanError(f"no matching of {k} admissible pairs exists")
    return sorted(pairs)


def _greedy(scores: np.ndarray, count: int | None, threshold: float | None) -> list:
    n, m = scores.shape
    flat = scores.ravel()
    ii, jj = np.divmod(np.arange(flat.size), m)
    order = np.lexsort((jj, ii, flat))
    limit = min(n, m) if count is None else count
    used_a = np.zeros(n, dtype=bool)
    used_b = np.zeros(m, dtype=bool)
    pairs = []
    for idx in order:
        if len(pairs) >= limit:
            break
        if threshold is not None and flat[idx] >= threshold:
            break
        i, j = ii[idx], jj[idx]
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            pairs.append((int(i), int(j)))
    return pairs


def select_pairs(scores, count=None, threshold=None, policy: str = "greedy") -> list:
    """Disjoint pairs ``(i, j)`` of low functional difference.

    ``count`` caps the number of pairs (``None``: as many as possible) and
    ``threshold`` only admits pairs with ``d < threshold``. With both, the
    threshold decides and finding fewer than ``count`` pairs is an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a matrix")
    if policy not in POLICIES:
        raise PlanError(f"unknown policy {policy!r}")
    n, m = scores.shape
    if count is not None and count > min(n, m):
        raise PlanError(f"cannot share {count} units between layers of {n} and {m} units")
    if threshold is None:
        if policy == "greedy":
            return _greedy(scores, count, None)
        return _assignment(scores, min(n, m) if count is None else count)
    pairs = _greedy(scores, None, threshold)
    if count is not None and len(pairs) < count:
        raise PlanError(f"threshold {threshold:g} admits only {len(pairs)} pairs, {count} requested")
    if policy == "greedy":
        return pairs
    return _assignment(np.where(scores < threshold, scores, np.inf), len(pairs))


# ---------------------------------------------------------------------------
# joint-model surgery


def _merge_units(zm: ZippedModel, k: int, pairs: list, coord_rows: np.ndarray, merged: np.ndarray, merged_mask=None):
    """Merge joint units ``j`` into ``i`` for every ``(i, j)`` of layer ``k``, in place.

    ``merged`` holds one column per pair over ``coord_rows`` followed by the bias.
    Rows outside ``coord_rows`` keep the weights of whichever unit used them.
    """
    if not pairs:
        return
    layer = zm.layers[k]
    g = layer.rows_per_unit
    in_m = zm.in_members(k).astype(np.int64)
    cur = zm.members[k]
    w, bias = layer.weights, layer.bias
    for p, (i, j) in enumerate(pairs):
        mi, mj = cur[i].copy(), cur[j].copy()
        if np.any(mi & mj):
            raise ZipError(k + 1, ValueError(f"units {i} and {j} already share a task"))
        use_i = np.repeat(in_m @ mi > 0, g)
        use_j = np.repeat(in_m @ mj > 0, g)
        use = use_i | use_j
        col = np.where(use_i, w[:, i], 0.0) + np.where(use_j & ~use_i, w[:, j], 0.0)
        col[coord_rows] = merged[:-1, p]
        w[:, i] = np.where(use, col, 0.0)
        bias[i] = merged[-1, p]
        if layer.mask is not None:
            mcol = np.where(use_i, layer.mask[:, i], False) | np.where(use_j & ~use_i, layer.mask[:, j], False)
            if merged_mask is not None:
                mcol[coord_rows] = merged_mask[:, p]
            mcol &= use
            layer.mask[:, i] = mcol
            w[:, i] *= mcol
        cur[i] = mi | mj
        for t in np.flatnonzero(mj):
            o = zm.origins[k][t]
            o[o == j] = i
        if k in zm.shortcuts:
            sc = zm.shortcuts[k]
            sc[:, i] = np.where(sc[:, i] >= 0, sc[:, i], sc[:, j])
        # the next layer reads both units' outputs; their task supports are disjoint
        nxt = zm.layers[k + 1]
        gn = nxt.rows_per_unit
        ri = expand_units([i], gn)
        rj = expand_units([j], gn)
        nxt.weights[ri] += nxt.weights[rj]
        if nxt.mask is not None:
            nxt.mask[ri] |= nxt.mask[rj]
        # residual blocks reading layer k through their shortcut
        for e, sc in zm.shortcuts.items():
            if e - 2 == k:
                sc[sc == j] = i
    _drop_units(zm, k, np.array(sorted(j for _, j in pairs)))


def _drop_units(zm: ZippedModel, k: int, drop: np.ndarray) -> None:
    layer = zm.layers[k]
    keep = np.ones(layer.out_units, dtype=bool)
    keep[drop] = False
    remap = np.cumsum(keep) - 1
    layer.weights = np.ascontiguousarray(layer.weights[:, keep])
    layer.bias = layer.bias[keep]
    if layer.mask is not None:
        layer.mask = np.ascontiguousarray(layer.mask[:, keep])
    zm.members[k] = zm.members[k][keep]
    zm.origins[k] = [remap[o] for o in zm.origins[k]]
    if k in zm.shortcuts:
        zm.shortcuts[k] = zm.shortcuts[k][:, keep]
    nxt = zm.layers[k + 1]
    rows = expand_units(np.flatnonzero(keep), nxt.rows_per_unit)
    nxt.weights = np.ascontiguousarray(nxt.weights[rows])
    if nxt.mask is not None:
        nxt.mask = np.ascontiguousarray(nxt.mask[rows])
    if nxt.conv is not None:
        nxt.conv = nxt.conv.with_channels(int(keep.sum()))
    for e, sc in zm.shortcuts.items():
        if e - 2 == k:
            zm.shortcuts[e] = np.where(sc >= 0, remap[np.maximum(sc, 0)], -1)


def _side_mask(zm: ZippedModel, members: np.ndarray, side) -> np.ndarray:
    return members[:, [zm.task_index(t) for t in side]].any(axis=1)


def zip_layer(zm: ZippedModel, k: int, pairs: list, merged, task_a=None, task_b=None, merged_mask=None):
    """Share the unit pairs ``(i, j)`` of hidden layer ``k`` (0-based) between two tasks.

    ``i`` and ``j`` are original unit indices of the two tasks. ``merged`` has
    one column per pair over the rows of the inputs both tasks use, then the
    bias. Returns the new joint model, the five-block view of the layer, and
    each task's permutation of its original units inside the joint layer (the
    row order the next layer now expects).
    """
    task_a = zm.tasks[0] if task_a is None else task_a
    task_b = zm.tasks[1] if task_b is None else task_b
    a, b = zm.task_index(task_a), zm.task_index(task_b)
    if not 0 <= k < zm.depth - 1:
        raise ValueError(f"hidden layer index {k} out of range")
    merged = np.asarray(merged, dtype=np.float64).reshape(-1, len(pairs)) if pairs else np.zeros((0, 0))
    ia = [i for i, _ in pairs]
    jb = [j for _, j in pairs]
    if len(set(ia)) != len(ia) or len(set(jb)) != len(jb):
        raise ValueError("pairs must be disjoint")
    zm = zm.copy()
    in_m = zm.in_members(k)
    coord_units = np.flatnonzero(in_m[:, a] & in_m[:, b])
    coord_rows = expand_units(coord_units, zm.layers[k].rows_per_unit)
    if pairs and merged.shape[0] != coord_rows.size + 1:
        raise ValueError(f"merged weights need {coord_rows.size + 1} rows, got {merged.shape[0]}")
    joint = [(int(zm.origins[k][a][i]), int(zm.origins[k][b][j])) for i, j in pairs]
    _merge_units(zm, k, joint, coord_rows, merged, merged_mask)
    return zm, zm.shared_layer(k, task_a, task_b), zm.permutation(k, task_a), zm.permutation(k, task_b)


# ---------------------------------------------------------------------------
# one zip step


@dataclass
class LayerRecord:
    layer: int
    kind: str
    candidates_a: int
    candidates_b: int
    shared: int
    d_min: float
    d_median: float
    d_max: float
    delta_e: float
    degenerate: bool
    retrain: int = 0
    params: int = 0
    savings: int = 0
    errors_pre: dict = field(default_factory=dict)
    errors_post: dict = field(default_factory=dict)

    def line(self) -> str:
        fields = {
            "layer": self.layer,
            "kind": self.kind,
            "candidates_a": self.candidates_a,
            "candidates_b": self.candidates_b,
            "shared": self.shared,
            "d_min": f"{self.d_min:.6g}",
            "d_median": f"{self.d_median:.6g}",
            "d_max": f"{self.d_max:.6g}",
            "delta_e": f"{self.delta_e:.6g}",
            "degenerate": int(self.degenerate),
            "retrain": self.retrain,
            "params": self.params,
            "savings": self.savings,
        }
        fields.update({f"err_pre.{t}": f"{e:.6f}" for t, e in self.errors_pre.items()})
        fields.update({f"err_post.{t}": f"{e:.6f}" for t, e in self.errors_post.items()})
        return " ".join(f"{key}={value}" for key, value in fields.items())


@dataclass
class ZipReport:
    """Per-layer zip records plus the errors of the original models."""

    tasks: list = field(default_factory=list)
    baseline: dict = field(default_factory=dict)
    original_params: int = 0
    layers: list = field(default_factory=list)

    def lines(self) -> list:
        head = {"record": "baseline", "tasks": ",".join(map(str, self.tasks)), "params": self.original_params}
        head.update({f"err.{t}": f"{e:.6f}" for t, e in self.baseline.items()})
        out = [" ".join(f"{k}={v}" for k, v in head.items())]
        out += ["record=layer " + rec.line() for rec in self.layers]
        if self.layers:
            last = self.layers[-1]
            final = {"record": "summary", "params": last.params, "savings": last.savings}
            errs = last.errors_post or last.errors_pre
            final.update({f"err.{t}": f"{e:.6f}" for t, e in errs.items()})
            if self.baseline and errs:
                deltas = [errs[t] - self.baseline[t] for t in errs if t in self.baseline]
                final["mean_error_delta"] = f"{np.mean(deltas):.6f}"
            out.append(" ".join(f"{k}={v}" for k, v in final.items()))
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def parse_report(text: str) -> list:
    """Parse key=value report lines back into dicts (values left as strings)."""
    records = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            records.append(dict(item.split("=", 1) for item in line.split()))
    return records


def _side_hessian(zm, k, tasks, coord_units, calibs, task_weights) -> SpdMatrix:
    """Weighted layer Hessian of a task group over joint input units ``coord_units``.

    Per-task estimates (cached on ``zm``) are mapped into the joint coordinate
    order, zero where a task does not read a unit, then combined with
    :func:`merge_hessians` and scaled by the group's total weight.
    """
    layer = zm.layers[k]
    g = layer.rows_per_unit
    in_m = zm.in_members(k)
    dim = coord_units.size * g + 1
    combined = None
    for t in tasks:
        ti = zm.task_index(t)
        est = task_hessian(zm, t, k, calibs[t])
        t_units = np.flatnonzero(in_m[:, ti])
        present = in_m[coord_units, ti]
        local = np.searchsorted(t_units, coord_units[present])
        src = np.append(expand_units(local, g), est.dim - 1)
        dst = np.append(expand_units(np.flatnonzero(present), g), dim - 1)
        entries = np.zeros((dim, dim))
        entries[np.ix_(dst, dst)] = est.matrix.entries[np.ix_(src, src)]
        mapped = HessianEstimate(SpdMatrix(entries, check=False), est.n_samples, task_weights[t], t)
        combined = mapped if combined is None else merge_hessians(combined, mapped)
    return combined.matrix.scaled(combined.alpha_weight)


def _groups(zm, members, units, side):
    """Split candidate units by their task membership within ``side``."""
    idx = [zm.task_index(t) for t in side]
    keys = {}
    for pos, u in enumerate(units):
        key = tuple(side[q] for q, ti in enumerate(idx) if members[u, ti])
        keys.setdefault(key, []).append(pos)
    return {key: np.array(pos) for key, pos in keys.items()}


class _Step(NamedTuple):
    zm: ZippedModel
    record: LayerRecord


def _check_residual(zm, k, side_a, side_b):
    layer = zm.layers[k]
    if layer.kind != "res_entry":
        return
    in_m = zm.in_members(k)
    a = _side_mask(zm, in_m, side_a)
    b = _side_mask(zm, in_m, side_b)
    if np.any(a != b):
        raise PlanError(
            f"layer {k + 1} opens a residual block but its input is not fully merged "
            f"({int((a & ~b).sum())} + {int((b & ~a).sum())} unshared units)"
        )


def zip_step(zm, k, side_a, side_b, calibs, task_weights, count=None, threshold=None, policy="greedy", chooser=None):
    """Zip hidden layer ``k`` (0-based) between two task groups; returns the new model and its record.

    ``chooser`` replaces the Hessian-based merge: it receives the candidate
    weight matrices and returns ``(pairs, merged)``; used by baselines.
    """
    zm = _copy_with_cache(zm)
    layer = zm.layers[k]
    cur = zm.members[k]
    in_m = zm.in_members(k)
    in_a, in_b = _side_mask(zm, in_m, side_a), _side_mask(zm, in_m, side_b)
    coord_units = np.flatnonzero(in_a & in_b)
    coord_rows = expand_units(coord_units, layer.rows_per_unit)
    out_a, out_b = _side_mask(zm, cur, side_a), _side_mask(zm, cur, side_b)
    cand_a = np.flatnonzero(out_a & ~out_b)
    cand_b = np.flatnonzero(out_b & ~out_a)
    degenerate = coord_units.size == 0

    def columns(units):
        return np.vstack([layer.weights[np.ix_(coord_rows, units)], layer.bias[units][None, :]])

    wa, wb = columns(cand_a), columns(cand_b)
    if chooser is not None:
        pairs, merged = chooser(wa, wb)
        d_sel = np.zeros(len(pairs))
    else:
        groups_a = _groups(zm, cur, cand_a, side_a)
        groups_b = _groups(zm, cur, cand_b, side_b)
        hess_a = {s: _side_hessian(zm, k, s, coord_units, calibs, task_weights) for s in groups_a}
        hess_b = {s: _side_hessian(zm, k, s, coord_units, calibs, task_weights) for s in groups_b}
        scores = np.zeros((cand_a.size, cand_b.size))
        if not degenerate:
            for sa, pa in groups_a.items():
                for sb, pb in groups_b.items():
                    scores[np.ix_(pa, pb)] = pair_scores(wa[:, pa], wb[:, pb], hess_a[sa], hess_b[sb])
        pairs = select_pairs(scores, count, threshold, policy)
        merged = np.zeros((coord_rows.size + 1, len(pairs)))
        key_a = {int(p): s for s, ps in groups_a.items() for p in ps}
        key_b = {int(p): s for s, ps in groups_b.items() for p in ps}
        by_group = {}
        for n, (i, j) in enumerate(pairs):
            by_group.setdefault((key_a[i], key_b[j]), []).append(n)
        for (sa, sb), ns in by_group.items():
            pi = [pairs[n][0] for n in ns]
            pj = [pairs[n][1] for n in ns]
            merged[:, ns] = merged_weights(wa[:, pi], wb[:, pj], hess_a[sa], hess_b[sb])
        d_sel = np.array([scores[i, j] for i, j in pairs])
    if pairs:
        _check_residual(zm, k, side_a, side_b)
    mask = None
    if layer.mask is not None and pairs:
        mask = np.ones((coord_rows.size + 1, len(pairs)), dtype=bool)
        for n, (i, j) in enumerate(pairs):
            ma = layer.mask[coord_rows, cand_a[i]]
            mb = layer.mask[coord_rows, cand_b[j]]
            na, nb = int(ma.sum()), int(mb.sum())
            mask[:-1, n] = ma if na > nb else mb if nb > na else ma | mb
        merged = merged * mask
        mask = mask[:-1]
    joint = [(int(cand_a[i]), int(cand_b[j])) for i, j in pairs]
    _merge_units(zm, k, joint, coord_rows, merged, mask)
    shared_now = int((_side_mask(zm, zm.members[k], side_a) & _side_mask(zm, zm.members[k], side_b)).sum())
    rec = LayerRecord(
        layer=k + 1,
        kind=layer.kind,
        candidates_a=int(cand_a.size),
        candidates_b=int(cand_b.size),
        shared=shared_now,
        d_min=float(d_sel.min()) if d_sel.size else 0.0,
        d_median=float(np.median(d_sel)) if d_sel.size else 0.0,
        d_max=float(d_sel.max()) if d_sel.size else 0.0,
        delta_e=float(d_sel.sum()),
        degenerate=bool(degenerate and len(pairs) > 0),
    )
    return _Step(zm, rec)


def _copy_with_cache(zm: ZippedModel) -> ZippedModel:
    new = zm.copy()
    new.hessian_cache = zm.hessian_cache
    return new


# ---------------------------------------------------------------------------
# pipelines


def _errors(zm, eval_data) -> dict:
    from .data import evaluate

    if not eval_data:
        return {}
    return {t: evaluate(zm, t, eval_data[t]) for t in zm.tasks if t in eval_data}


def _run(zm, side_a, side_b, calibs, plan, side_weights, train_data, eval_data, report, log, original_params):
    n_hidden = zm.depth - 1
    plan.check_depth(n_hidden)
    task_weights = {t: side_weights[0] / len(side_a) for t in side_a}
    task_weights.update({t: side_weights[1] / len(side_b) for t in side_b})
    missing = [t for t in zm.tasks if t not in calibs]
    if missing:
        raise ValueError(f"no calibration data for tasks {missing}")
    if plan.retrain.total > 0 and not train_data:
        raise PlanError("the retraining schedule needs training data")
    for k in range(n_hidden):
        count, threshold = plan.target(k)
        try:
            zm, rec = zip_step(zm, k, side_a, side_b, calibs, task_weights, count, threshold, plan.policy)
        except (PlanError, ZipError):
            raise
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ZipError(k + 1, exc) from exc
        rec.errors_pre = _errors(zm, eval_data)
        iterations = plan.retrain.at(k)
        if iterations:
            cfg = TrainConfig(
                learning_rate=plan.train.learning_rate,
                batch_size=plan.train.batch_size,
                iterations=iterations,
                seed=plan.train.seed + k,
                loss=plan.train.loss,
                lr_steps=plan.train.lr_steps,
                log_every=plan.train.log_every,
            )
            cache = zm.hessian_cache
            zm = retrain_joint(zm, train_data, cfg, task_weights, log)
            zm.hessian_cache = cache
            rec.errors_post = _errors(zm, eval_data)
        rec.retrain = iterations
        rec.params = zm.parameter_count()
        rec.savings = original_params - rec.params
        if report is not None:
            report.layers.append(rec)
        if log is not None:
            print("record=layer " + rec.line(), file=log, flush=True)
    return zm


def _start_report(report, zm, nets, eval_data):
    if report is None:
        return None
    report.tasks = list(zm.tasks)
    report.original_params = sum(n.parameter_count() for n in nets)
    if eval_data:
        from .data import evaluate

        report.baseline = {n.task_id: evaluate(n, None, eval_data[n.task_id]) for n in nets if n.task_id in eval_data}
    return report


def zip_models(netA: Network, netB: Network, calibA, calibB, plan: MergePlan, *, train_data=None, eval_data=None, report=None, log=None) -> ZippedModel:
    """Zip two networks of equal depth hidden layer by hidden layer.

    ``calibA``/``calibB`` are :class:`CalibrationSet` objects (or raw input
    arrays). ``train_data`` and ``eval_data`` map task ids to datasets and
    are needed for retraining and for the error columns of ``report``.
    """
    if netA.task_id == netB.task_id:
        raise ValueError(f"both networks carry task id {netA.task_id!r}; give them distinct ids")
    if netA.depth != netB.depth:
        raise ValueError(f"depth mismatch: {netA.depth} vs {netB.depth} layers")
    zm = zip_without_sharing([netA, netB])
    calibs = {netA.task_id: _calib(calibA, netA.task_id), netB.task_id: _calib(calibB, netB.task_id)}
    alpha = 0.5 if plan.alpha is None else plan.alpha
    report = _start_report(report, zm, [netA, netB], eval_data)
    return _run(
        zm, [netA.task_id], [netB.task_id], calibs, plan, (alpha, 1.0 - alpha),
        train_data, eval_data, report, log, netA.parameter_count() + netB.parameter_count(),
    )


def zip_additional(zm: ZippedModel, netC: Network, calibs: dict, plan: MergePlan, *, train_data=None, eval_data=None, report=None, log=None, original_params=None) -> ZippedModel:
    """Add ``netC`` to an already zipped model.

    The existing tasks form one side, whose layer Hessians are the merged
    per-task estimates; ``netC`` is the other side. ``calibs`` maps every task
    (old and new) to its calibration set.
    """
    if netC.depth != zm.depth:
        raise ValueError(f"depth mismatch: joint model has {zm.depth} layers, network has {netC.depth}")
    old = list(zm.tasks)
    cache = zm.hessian_cache
    zm = zm.embed(netC)
    zm.hessian_cache = cache
    calibs = {t: _calib(c, t) for t, c in calibs.items()}
    alpha = len(old) / (len(old) + 1) if plan.alpha is None else plan.alpha
    if original_params is None:
        if report is not None and report.original_params:
            original_params = report.original_params + netC.parameter_count()
        else:
            original_params = zm.parameter_count()
    if report is not None:
        report.tasks = list(zm.tasks)
        report.original_params = original_params
        if eval_data:
            from .data import evaluate

            for t in zm.tasks:
                if t in eval_data and t not in report.baseline:
                    model = netC if t == netC.task_id else zm
                    report.baseline[t] = evaluate(model, t, eval_data[t])
    return _run(zm, old, [netC.task_id], calibs, plan, (alpha, 1.0 - alpha), train_data, eval_data, report, log, original_params)


def zip_many(nets: list, calibs: dict, plan: MergePlan, **kw) -> ZippedModel:
    """Zip two networks, then add the remaining ones one at a time."""
    if len(nets) < 2:
        raise ValueError("need at least two networks")
    zm = zip_models(nets[0], nets[1], calibs[nets[0].task_id], calibs[nets[1].task_id], plan, **kw)
    total = nets[0].parameter_count() + nets[1].parameter_count()
    for net in nets[2:]:
        total += net.parameter_count()
        zm = zip_additional(zm, net, calibs, plan, original_params=total, **kw)
    return zm


def _calib(c, task) -> CalibrationSet:
    return c if isinstance(c, CalibrationSet) else CalibrationSet(c, task)


# ---------------------------------------------------------------------------
# specializations


def zip_conv_layer(zm: ZippedModel, k: int, calibs: dict, count=None, threshold=None, alpha: float = 0.5, task_a=None, task_b=None):
    """Share kernels of conv layer ``k`` between two tasks.

    A kernel's incoming weights (channel x kernel row x kernel col over the
    shared input channels) are flattened into one vector for scoring and
    merging; the next layer, conv or dense, is re-indexed accordingly.
    """
    if zm.layers[k].kind != "conv":
        raise ValueError(f"layer {k + 1} is not a conv layer")
    return _two_task_step(zm, k, calibs, count, threshold, alpha, task_a, task_b)


def zip_residual_block(zm: ZippedModel, k_entry: int, calibs: dict, counts=(None, None), alpha: float = 0.5, task_a=None, task_b=None):
    """Zip the two layers of the residual block opened by layer ``k_entry``.

    The block input must already be fully merged; the shortcut maps of both
    tasks are carried along with the merged units.
    """
    if zm.layers[k_entry].kind != "res_entry":
        raise ValueError(f"layer {k_entry + 1} does not open a residual block")
    zm, rec_in = _two_task_step(zm, k_entry, calibs, counts[0], None, alpha, task_a, task_b)
    zm, rec_out = _two_task_step(zm, k_entry + 1, calibs, counts[1], None, alpha, task_a, task_b)
    return zm, [rec_in, rec_out]


def _two_task_step(zm, k, calibs, count, threshold, alpha, task_a, task_b):
    task_a = zm.tasks[0] if task_a is None else task_a
    task_b = zm.tasks[1] if task_b is None else task_b
    calibs = {t: _calib(c, t) for t, c in calibs.items()}
    return zip_step(zm, k, [task_a], [task_b], calibs, {task_a: alpha, task_b: 1.0 - alpha}, count, threshold)


def random_sharing(netA: Network, netB: Network, counts: list, seed: int = 0) -> ZippedModel:
    """Baseline: share random unit pairs, each keeping one randomly chosen side's weights."""
    rng = np.random.default_rng(seed)
    zm = zip_without_sharing([netA, netB])
    a, b = [netA.task_id], [netB.task_id]

    def chooser(wa, wb):
        n = counts[k]
        ia = rng.permutation(wa.shape[1])[:n]
        jb = rng.permutation(wb.shape[1])[:n]
        pick_a = rng.random(n) < 0.5
        merged = np.where(pick_a[None, :], wa[:, ia], wb[:, jb])
        return list(zip(ia.tolist(), jb.tolist())), merged

    for k, n in enumerate(counts):
        if n:
            zm = zip_step(zm, k, a, b, {}, {}, chooser=chooser).zm
    return zm


def output_drift(original: Network, zipped, calib, task=None) -> float:
    """Accumulated output deviation ``(1/sqrt(n)) sum_n ||x~_L - x_L||`` on calibration inputs."""
    x = calib.inputs if isinstance(calib, CalibrationSet) else np.asarray(calib, dtype=np.float64)
    task = original.task_id if task is None else task
    net = zipped.task_network(task) if isinstance(zipped, ZippedModel) else zipped
    if net.n_outputs != original.n_outputs or net.input_dim != original.input_dim:
        raise ValueError("zipped and original models differ in input or output size")
    diff = predict(net, x) - predict(original, x)
    return float(np.linalg.norm(diff, axis=1).sum() / np.sqrt(len(x)))


def self_zip_permutation(zm: ZippedModel, k: int, task_a, task_b) -> Permutation:
    """Which unit of ``task_b`` each unit of ``task_a`` was merged with, for shared layer ``k``."""
    view = zm.shared_layer(k, task_a, task_b)
    mapping = np.full(len(view.pairs), -1)
    for i, j in view.pairs:
        mapping[i] = j
    return Permutation(mapping)


def sharing_curve(netA: Network, netB: Network, calibA, calibB, layer: int, points, eval_data: dict, *, policy="exhaustive", seed=0) -> list:
    """Mean test error after sharing ``n`` units of one hidden layer, MTZ versus random pairs.

    ``layer`` counts from 1. No retraining is done. Returns one dict per point
    with keys ``shared``, ``mtz`` and ``random``.
    """
    from .data import evaluate

    n_hidden = netA.depth - 1
    if not 1 <= layer <= n_hidden:
        raise ValueError(f"layer {layer} out of range 1..{n_hidden}")
    rows = []
    for n in points:
        counts = [0] * n_hidden
        counts[layer - 1] = int(n)
        plan = MergePlan(share="counts", counts=counts, policy=policy)
        zm = zip_models(netA, netB, calibA, calibB, plan)
        rz = random_sharing(netA, netB, counts, seed)
        mean = lambda m: float(np.mean([evaluate(m, t, eval_data[t]) for t in m.tasks]))
        rows.append({"shared": int(n), "mtz": mean(zm), "random": mean(rz)})
    return rows
