"""Levenberg-Marquardt solver for confidence-weighted reprojection error.

Every observation ``k`` contributes ``0.5 * w_k * |r_k|^2`` to the cost,
i.e. its information matrix is ``w_k * I``. Poses are updated on the left,
``T <- exp(delta) @ T``, with ``delta = (rotational, translational)``;
free landmarks are updated additively.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from probslam.ba.problem import Landmark
from probslam.errors import SolverDiverged, Underdetermined
from probslam.geometry import DEPTH_EPS, Pose, exp_rt, exp_rt_many

MAX_LAMBDA = 1e12
# relative size of the band in which a measured cost change is rounding noise
COST_NOISE = 1e-12
LAMBDA_DECREASE = 0.5
LAMBDA_INCREASE = 4.0


class Termination(str, Enum):
    GRADIENT_SMALL = "gradient_small"
    STEP_SMALL = "step_small"
    MAX_ITERATIONS = "max_iterations"
    COST_STALLED = "cost_stalled"


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 100
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    lm_initial_lambda: float = 1e-3


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    termination: Termination
    skipped_observations: int = 0
    history: list = field(default_factory=list)


class _Layout:
    """Maps problem ids to rows of the stacked state and parameter vector."""

    def __init__(self, problem):
        self.frame_ids = sorted(problem.poses)
        self.landmark_ids = sorted(problem.landmarks)
        fixed_poses = set(problem.fixed_poses)
        if not problem.pose_only and not fixed_poses and self.frame_ids:
            # gauge: anchor the first pose in full BA
            fixed_poses = {self.frame_ids[0]}
        self.fixed_poses = fixed_poses
        self.free_frames = [f for f in self.frame_ids if f not in fixed_poses]
        self.free_landmarks = [i for i in self.landmark_ids if i not in problem.fixed_landmarks]
        self.free_pose_rows = [k for k, f in enumerate(self.frame_ids) if f not in fixed_poses]
        self.free_lm_rows = np.array(
            [k for k, i in enumerate(self.landmark_ids) if i not in problem.fixed_landmarks],
            dtype=np.int64,
        )

        self.pose_col = np.full(len(self.frame_ids), -1, dtype=np.int64)
        self.pose_col[self.free_pose_rows] = 6 * np.arange(len(self.free_pose_rows))
        offset = 6 * len(self.free_frames)
        self.lm_col = np.full(len(self.landmark_ids), -1, dtype=np.int64)
        self.lm_col[self.free_lm_rows] = offset + 3 * np.arange(len(self.free_lm_rows))
        self.n_params = offset + 3 * len(self.free_landmarks)

        frames, lms, pixels, weights = problem.arrays()
        self.pidx = np.searchsorted(self.frame_ids, frames)
        self.lidx = np.searchsorted(self.landmark_ids, lms)
        self.pixels = pixels
        self.weights = weights


def _state(problem, layout):
    R = np.stack([problem.poses[f].R for f in layout.frame_ids])
    t = np.stack([problem.poses[f].translation for f in layout.frame_ids])
    P = np.array([problem.landmarks[i].position for i in layout.landmark_ids]).reshape(-1, 3)
    return R, t, P


def _evaluate(K, layout, R, t, P, jacobians=False):
    """Residuals, validity mask and (optionally) per-observation Jacobians."""
    Rk = R[layout.pidx]
    Xc = np.matmul(Rk, P[layout.lidx][:, :, None])[:, :, 0] + t[layout.pidx]
    z = Xc[:, 2]
    valid = z > DEPTH_EPS
    zs = np.where(valid, z, 1.0)
    x, y = Xc[:, 0] / zs, Xc[:, 1] / zs
    pred = np.stack([K.fx * x + K.cx, K.fy * y + K.cy], axis=1)
    res = np.where(valid[:, None], layout.pixels - pred, 0.0)
    if not jacobians:
        return res, valid
    n = len(z)
    fx, fy = K.fx, K.fy
    iz = 1.0 / zs
    # d residual / d (rot, trans) for a left perturbation, and d residual / d Xc
    Jpose = np.empty((n, 2, 6))
    Jpose[:, 0, 0] = fx * x * y
    Jpose[:, 0, 1] = -fx * (1.0 + x * x)
    Jpose[:, 0, 2] = fx * y
    Jpose[:, 0, 3] = -fx * iz
    Jpose[:, 0, 4] = 0.0
    Jpose[:, 0, 5] = fx * x * iz
    Jpose[:, 1, 0] = fy * (1.0 + y * y)
    Jpose[:, 1, 1] = -fy * x * y
    Jpose[:, 1, 2] = -fy * x
    Jpose[:, 1, 3] = 0.0
    Jpose[:, 1, 4] = -fy * iz
    Jpose[:, 1, 5] = fy * y * iz
    Jlm = np.matmul(Jpose[:, :, 3:], Rk)
    Jpose[~valid] = 0.0
    Jlm[~valid] = 0.0
    return res, valid, Jpose, Jlm


def _cost(res, valid, weights):
    r2 = np.sum(res * res, axis=1)
    return 0.5 * float(np.sum(weights[valid] * r2[valid]))


def _cost_change(res, new_res, weights):
    """``cost(new) - cost(old)`` from residual differences.

    Both residual sets share the measured pixels, so ``new - old`` is free
    of their rounding; subtracting two totals instead would lose every
    digit below about 1e-16 of the cost and stall the solver early.
    Invalid rows are zero in either set, which keeps the identity exact.
    """
    d = new_res - res
    s = new_res + res
    return 0.5 * float(np.sum(weights * (d[:, 0] * s[:, 0] + d[:, 1] * s[:, 1])))


def _normal_equations(layout, res, valid, Jpose, Jlm):
    """Assemble ``H = J^T W J`` and ``g = J^T W r`` densely, in observation order."""
    w = np.where(valid, layout.weights, 0.0)
    H = np.zeros((layout.n_params, layout.n_params))
    g = np.zeros(layout.n_params)
    wr = w[:, None] * res
    n_free_poses = len(layout.free_frames)

    if n_free_poses:
        WJp = w[:, None, None] * Jpose
        blocks = np.zeros((len(layout.frame_ids), 6, 6))
        grads = np.zeros((len(layout.frame_ids), 6))
        hb = np.matmul(Jpose.transpose(0, 2, 1), WJp)
        gb = np.matmul(wr[:, None, :], Jpose)[:, 0, :]
        if len(layout.frame_ids) == 1:
            blocks[0], grads[0] = hb.sum(axis=0), gb.sum(axis=0)
        else:
            np.add.at(blocks, layout.pidx, hb)
            np.add.at(grads, layout.pidx, gb)
        for k, col in enumerate(layout.pose_col):
            if col >= 0:
                H[col:col + 6, col:col + 6] = blocks[k]
                g[col:col + 6] = grads[k]
    if layout.free_landmarks:
        WJl = w[:, None, None] * Jlm
        blocks = np.zeros((len(layout.landmark_ids), 3, 3))
        grads = np.zeros((len(layout.landmark_ids), 3))
        np.add.at(blocks, layout.lidx, np.matmul(Jlm.transpose(0, 2, 1), WJl))
        np.add.at(grads, layout.lidx, np.matmul(wr[:, None, :], Jlm)[:, 0, :])
        for k, col in enumerate(layout.lm_col):
            if col >= 0:
                H[col:col + 3, col:col + 3] = blocks[k]
                g[col:col + 3] = grads[k]
        pc = layout.pose_col[layout.pidx]
        lc = layout.lm_col[layout.lidx]
        both = (pc >= 0) & (lc >= 0)
        if both.any():
            # each (frame, landmark) pair occurs once, so plain assignment is exact
            cross = np.matmul(Jpose[both].transpose(0, 2, 1), WJl[both])
            rows = pc[both][:, None, None] + np.arange(6)[None, :, None]
            cols = lc[both][:, None, None] + np.arange(3)[None, None, :]
            H[rows, cols] = cross
            H[cols.transpose(0, 2, 1), rows.transpose(0, 2, 1)] = cross.transpose(0, 2, 1)
    return H, g


def cost_gradient(problem):
    """Analytic gradient of the weighted cost.

    Returns ``(pose_grads, landmark_grads)``: dicts mapping every frame id to
    the derivative along a left twist ``(rot, trans)`` and every landmark id
    to the derivative w.r.t. its position. Fixed flags are ignored.
    """
    layout = _Layout(problem)
    R, t, P = _state(problem, layout)
    res, valid, Jpose, Jlm = _evaluate(problem.intrinsics, layout, R, t, P, jacobians=True)
    wr = np.where(valid, layout.weights, 0.0)[:, None] * res
    gp = np.zeros((len(layout.frame_ids), 6))
    gl = np.zeros((len(layout.landmark_ids), 3))
    np.add.at(gp, layout.pidx, np.matmul(wr[:, None, :], Jpose)[:, 0, :])
    np.add.at(gl, layout.lidx, np.matmul(wr[:, None, :], Jlm)[:, 0, :])
    return (
        {f: gp[k] for k, f in enumerate(layout.frame_ids)},
        {i: gl[k] for k, i in enumerate(layout.landmark_ids)},
    )


def _check_determined(problem, layout):
    if not layout.free_frames:
        raise Underdetermined("problem has no free pose")
    active = layout.weights > 0.0
    if problem.pose_only:
        P = np.array([problem.landmarks[i].position for i in layout.landmark_ids]).reshape(-1, 3)
        free = np.array(layout.free_pose_rows)
        n_obs = np.bincount(layout.pidx[active], minlength=len(layout.frame_ids))
        # distinct landmark positions per frame, counted via unique (frame, x, y, z) rows
        rows = np.unique(np.column_stack([layout.pidx[active], P[layout.lidx[active]]]), axis=0)
        n_pts = np.bincount(rows[:, 0].astype(np.int64), minlength=len(layout.frame_ids))
        for k in free:
            f = layout.frame_ids[k]
            if n_obs[k] < 6:
                raise Underdetermined(
                    f"frame {f} has {int(n_obs[k])} weighted observations, need at least 6"
                )
            if n_pts[k] < 4:
                raise Underdetermined(f"frame {f} sees fewer than 4 distinct landmarks")
    elif 2 * int(active.sum()) < layout.n_params:
        raise Underdetermined(
            f"{int(active.sum())} weighted observations cannot constrain {layout.n_params} parameters"
        )


def _apply(layout, R, t, P, delta):
    R, t, P = R.copy(), t.copy(), P.copy()
    for n, k in enumerate(layout.free_pose_rows):
        dR, dt = exp_rt(delta[6 * n:6 * n + 6])
        R[k] = dR @ R[k]
        t[k] = dR @ t[k] + dt
    off = 6 * len(layout.free_pose_rows)
    if len(layout.free_lm_rows):
        P[layout.free_lm_rows] += delta[off:].reshape(-1, 3)
    return R, t, P


def solve(problem, options=None):
    """Minimize the weighted reprojection cost.

    Returns ``(solved_problem, report)``. Accepted costs never increase.
    Raises :class:`Underdetermined` when some free pose lacks constraints and
    :class:`SolverDiverged` when damping exceeds 1e12 with no downhill step.
    """
    opts = options or SolveOptions()
    K = problem.intrinsics
    layout = _Layout(problem)
    _check_determined(problem, layout)

    R, t, P = _state(problem, layout)
    res, valid, Jpose, Jlm = _evaluate(K, layout, R, t, P, jacobians=True)
    cost = _cost(res, valid, layout.weights)
    report = SolveReport(0, cost, cost, False, Termination.MAX_ITERATIONS, history=[cost])
    lam = opts.lm_initial_lambda

    done = False
    while report.iterations < opts.max_iterations and not done:
        H, g = _normal_equations(layout, res, valid, Jpose, Jlm)
        if np.max(np.abs(g), initial=0.0) <= opts.gradient_tol:
            report.termination, report.converged = Termination.GRADIENT_SMALL, True
            break
        diag = np.diag(H).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1.0))
        while True:
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                if np.linalg.norm(delta) <= opts.step_tol:
                    report.termination, report.converged = Termination.STEP_SMALL, True
                    done = True
                    break
                cR, ct, cP = _apply(layout, R, t, P, delta)
                cres, cvalid = _evaluate(K, layout, cR, ct, cP)
                change = _cost_change(res, cres, layout.weights)
                predicted = -(g @ delta + 0.5 * delta @ H @ delta)
                noise = COST_NOISE * cost
                # a step that pushes points behind the camera only looks cheaper
                if change < 0.0 and cvalid.sum() >= valid.sum():
                    R, t, P = cR, ct, cP
                    cost = max(cost + change, 0.0)
                    lam *= LAMBDA_DECREASE
                    break
                if abs(change) <= noise and predicted <= noise and cvalid.sum() == valid.sum():
                    # the measured change is rounding noise; trust the quadratic model
                    R, t, P = cR, ct, cP
                    cost = max(cost - max(predicted, 0.0), 0.0)
                    lam *= LAMBDA_DECREASE
                    break
                if abs(change) <= 1e-15 * cost and cvalid.sum() == valid.sum():
                    report.termination, report.converged = Termination.COST_STALLED, True
                    done = True
                    break
            lam *= LAMBDA_INCREASE
            if lam > MAX_LAMBDA:
                raise SolverDiverged(f"damping exceeded {MAX_LAMBDA:g} without a downhill step")
        if done:
            break
        report.iterations += 1
        report.history.append(cost)
        res, valid, Jpose, Jlm = _evaluate(K, layout, R, t, P, jacobians=True)

    report.final_cost = cost
    report.skipped_observations = int((~valid).sum())
    poses = dict(problem.poses)
    for k in layout.free_pose_rows:
        poses[layout.frame_ids[k]] = Pose.from_rt(R[k], t[k])
    landmarks = dict(problem.landmarks)
    for k in layout.free_lm_rows:
        lid = layout.landmark_ids[k]
        landmarks[lid] = Landmark(lid, P[k])
    return replace(problem, poses=poses, landmarks=landmarks), report


def _frame_terms(K, R, t, pts, pixels, weights, starts, jacobians):
    """Residuals and per-frame valid counts (and H, g) for observations grouped by frame.

    ``R`` and ``t`` hold one row per observation; ``starts`` are the first
    observation of each group.
    """
    Xc = np.matmul(R, pts[:, :, None])[:, :, 0] + t
    z = Xc[:, 2]
    valid = z > DEPTH_EPS
    zs = np.where(valid, z, 1.0)
    x, y = Xc[:, 0] / zs, Xc[:, 1] / zs
    res = np.empty_like(pixels)
    res[:, 0] = np.where(valid, pixels[:, 0] - (K.fx * x + K.cx), 0.0)
    res[:, 1] = np.where(valid, pixels[:, 1] - (K.fy * y + K.cy), 0.0)
    nvalid = np.add.reduceat(valid.astype(np.int64), starts)
    if not jacobians:
        return res, nvalid
    w = np.where(valid, weights, 0.0)
    fx, fy = K.fx, K.fy
    iz = 1.0 / zs
    J = np.zeros((len(z), 2, 6))
    J[:, 0, 0] = fx * x * y
    J[:, 0, 1] = -fx * (1.0 + x * x)
    J[:, 0, 2] = fx * y
    J[:, 0, 3] = -fx * iz
    J[:, 0, 5] = fx * x * iz
    J[:, 1, 0] = fy * (1.0 + y * y)
    J[:, 1, 1] = -fy * x * y
    J[:, 1, 2] = -fy * x
    J[:, 1, 4] = -fy * iz
    J[:, 1, 5] = fy * y * iz
    WJ = (w[:, None, None] * J).reshape(-1, 6)
    J = J.reshape(-1, 6)
    r = res.reshape(-1)
    bounds = 2 * np.append(starts, len(z))
    H = np.empty((len(starts), 6, 6))
    g = np.empty((len(starts), 6))
    # one small dense product per frame is much faster than batched 2x6 blocks
    for k in range(len(starts)):
        a, b = bounds[k], bounds[k + 1]
        H[k] = J[a:b].T @ WJ[a:b]
        g[k] = r[a:b] @ WJ[a:b]
    return res, nvalid, H, g


def _mask(n, idx):
    m = np.zeros(n, dtype=bool)
    m[idx] = True
    return m


def solve_independent(problem, options=None):
    """Pose-only solve of every free frame, batched across frames.

    With all landmarks fixed the frames do not interact, so each one follows
    the same damped iteration sequence :func:`solve` would run on its
    single-frame subproblem; the frames are merely evaluated together.
    Returns ``(solved_problem, reports)`` with reports keyed by frame id.
    """
    if not problem.pose_only:
        raise ValueError("solve_independent needs every landmark fixed")
    opts = options or SolveOptions()
    K = problem.intrinsics
    layout = _Layout(problem)
    _check_determined(problem, layout)
    R0, t0, P = _state(problem, layout)

    free = np.array(layout.free_pose_rows, dtype=np.int64)
    n = len(free)
    keep = np.flatnonzero(np.isin(layout.pidx, free))
    obs = keep[np.argsort(layout.pidx[keep], kind="stable")]
    slot = np.searchsorted(free, layout.pidx[obs])
    pts, pixels, weights = P[layout.lidx[obs]], layout.pixels[obs], layout.weights[obs]
    counts = np.bincount(slot, minlength=n)

    def starts_of(sel):
        return np.concatenate([[0], np.cumsum(counts[sel])[:-1]])

    def terms(sel, R, t, jacobians):
        m = sel[slot]
        s = slot[m]
        return _frame_terms(K, R[s], t[s], pts[m], pixels[m], weights[m], starts_of(sel), jacobians)

    R, t = R0[free].copy(), t0[free].copy()
    everyone = np.ones(n, dtype=bool)
    res, nvalid, H, g = terms(everyone, R, t, True)
    starts = starts_of(everyone)
    r2 = res[:, 0] ** 2 + res[:, 1] ** 2
    cost = 0.5 * np.add.reduceat(weights * r2, starts) if len(r2) else np.zeros(n)
    lam = np.full(n, opts.lm_initial_lambda)
    iters = np.zeros(n, dtype=np.int64)
    reports = [
        SolveReport(0, float(c), float(c), False, Termination.MAX_ITERATIONS, history=[float(c)])
        for c in cost
    ]
    active = everyone.copy()
    fresh = everyone.copy()

    def finish(mask, termination, converged):
        for k in np.flatnonzero(mask):
            reports[k].termination, reports[k].converged = termination, converged
        active[mask] = False

    while active.any():
        finish(active & fresh & (iters >= opts.max_iterations), Termination.MAX_ITERATIONS, False)
        gmax = np.max(np.abs(g), axis=1)
        finish(active & fresh & (gmax <= opts.gradient_tol), Termination.GRADIENT_SMALL, True)
        fresh[:] = False
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        diag = np.diagonal(H[idx], axis1=1, axis2=2)
        diag = np.maximum(diag, 1e-12 * np.maximum(diag.max(axis=1), 1.0)[:, None])
        A = H[idx] + (lam[idx][:, None] * diag)[:, :, None] * np.eye(6)
        delta = np.full((len(idx), 6), np.nan)
        try:
            delta = np.linalg.solve(A, -g[idx][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            for r in range(len(idx)):
                try:
                    delta[r] = np.linalg.solve(A[r], -g[idx[r]])
                except np.linalg.LinAlgError:
                    pass
        solved = np.all(np.isfinite(delta), axis=1)
        tiny = solved & (np.linalg.norm(np.where(solved[:, None], delta, 0.0), axis=1) <= opts.step_tol)
        finish(_mask(n, idx[tiny]), Termination.STEP_SMALL, True)

        trial = solved & ~tiny
        tidx = idx[trial]
        reject = idx[~solved]
        if len(tidx):
            dR, dt = exp_rt_many(delta[trial])
            cR = np.matmul(dR, R[tidx])
            ct = np.matmul(dR, t[tidx][:, :, None])[:, :, 0] + dt
            sel = _mask(n, tidx)
            tR, tt = R.copy(), t.copy()
            tR[tidx], tt[tidx] = cR, ct
            new_res, new_valid = terms(sel, tR, tt, False)
            m = sel[slot]
            d = new_res - res[m]
            sm = new_res + res[m]
            # cost change from residual differences, see _cost_change
            change = 0.5 * np.add.reduceat(
                weights[m] * (d[:, 0] * sm[:, 0] + d[:, 1] * sm[:, 1]), starts_of(sel)
            )
            old = cost[tidx]
            dl = delta[trial]
            Hd = np.matmul(H[tidx], dl[:, :, None])[:, :, 0]
            predicted = -np.sum(dl * (g[tidx] + 0.5 * Hd), axis=1)
            noise = COST_NOISE * old
            # a step that pushes points behind the camera only looks cheaper
            downhill = (change < 0.0) & (new_valid >= nvalid[tidx])
            # within rounding noise of the cost, trust the quadratic model
            in_noise = (
                ~downhill & (np.abs(change) <= noise) & (predicted <= noise)
                & (new_valid == nvalid[tidx])
            )
            accept = downhill | in_noise
            stall = ~accept & (np.abs(change) <= 1e-15 * old) & (new_valid == nvalid[tidx])
            acc = tidx[accept]
            R[acc], t[acc] = cR[accept], ct[accept]
            booked = np.where(downhill, change, -np.maximum(predicted, 0.0))
            cost[acc] = np.maximum(old[accept] + booked[accept], 0.0)
            lam[acc] *= LAMBDA_DECREASE
            iters[acc] += 1
            for k in acc:
                reports[k].history.append(float(cost[k]))
            finish(_mask(n, tidx[stall]), Termination.COST_STALLED, True)
            reject = np.concatenate([reject, tidx[~accept & ~stall]])
            if len(acc):
                sel = _mask(n, acc)
                rr, v, h, gg = terms(sel, R, t, True)
                res[sel[slot]] = rr
                nvalid[acc], H[acc], g[acc] = v, h, gg
                fresh[acc] = True
        lam[reject] *= LAMBDA_INCREASE
        if np.any(lam[reject] > MAX_LAMBDA):
            raise SolverDiverged(f"damping exceeded {MAX_LAMBDA:g} without a downhill step")

    poses = dict(problem.poses)
    out = {}
    for k, row in enumerate(free):
        fid = layout.frame_ids[row]
        poses[fid] = Pose.from_rt(R[k], t[k])
        rep = reports[k]
        rep.iterations = int(iters[k])
        rep.final_cost = float(cost[k])
        rep.skipped_observations = int(counts[k] - nvalid[k])
        out[fid] = rep
    return replace(problem, poses=poses), out
