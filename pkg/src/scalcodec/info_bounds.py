"""Exact discrete information lab.

Verifies, on small exactly-computable joint distributions, the rate bounds
that motivate conditional coding (coding a representation given a function of
another costs at least its standalone entropy, at most the sum) and the
exact identities behind residual coding (subtracting a prediction loses no
information and decorrelates exactly by the mutual information).

Entropies are base-2, computed in float64 with ascending summation so results
are reproducible to the last bit for a given distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

MI_CLIP = 1e-10


def _check_pmf(p):
    arr = np.asarray(p, dtype=np.float64)
    if arr.size == 0 or np.any(arr < 0):
        raise ContractError("pmf entries must be non-negative and non-empty")
    total = float(arr.sum())
    if abs(total - 1.0) > 1e-9:
        raise ContractError(f"pmf sums to {total}, expected 1")
    return arr


def entropy(pmf):
    """Shannon entropy in bits; zero-probability entries contribute nothing."""
    arr = _check_pmf(pmf).reshape(-1)
    terms = np.sort(arr[arr > 0])
    return float(np.sum(-terms * np.log2(terms)))


def joint_entropy(joint):
    return entropy(np.asarray(joint, dtype=np.float64).reshape(-1))


def conditional_entropy(joint, axis):
    """H(other | variable on `axis`) for a 2-D joint."""
    arr = _check_pmf(joint)
    if arr.ndim != 2:
        raise ContractError("conditional_entropy expects a 2-D joint")
    marg = arr.sum(axis=1 - axis)
    return joint_entropy(arr) - entropy(marg)


def mutual_information(joint):
    """I(A; B) >= 0 for a 2-D joint; tiny negative float64 residue clips to 0."""
    arr = _check_pmf(joint)
    if arr.ndim != 2:
        raise ContractError("mutual_information expects a 2-D joint")
    mi = entropy(arr.sum(axis=1)) + entropy(arr.sum(axis=0)) - joint_entropy(arr)
    if mi < -MI_CLIP:
        raise ContractError(f"mutual information {mi} below numeric tolerance")
    return max(mi, 0.0)


# ---------------------------------------------------------------------------
# conditional-coding bounds


@dataclass(frozen=True)
class ConditionalBoundsReport:
    h_base: float
    h_enh: float
    h_side: float
    h_enh_given_side: float
    mi_enh_side: float
    lower_slack: float      # (H(Yb) + H(Yc|Yt)) - H(Yc)
    upper_slack: float      # (H(Yb) + H(Yc)) - (H(Yb) + H(Yc|Yt))
    side_slack: float       # H(Yb) - H(Yt)
    lower_slack_identity: float   # lower_slack - (H(Yt|Yc) + H(Yb) - H(Yt))


def check_conditional_bounds(joint_base_enh, side_map):
    """joint_base_enh[b, c] = P(Y_base = b, Y_enh = c); side_map[b] gives the
    deterministic side-information symbol derived from the base symbol."""
    joint = _check_pmf(joint_base_enh)
    if joint.ndim != 2:
        raise ContractError("joint must be 2-D (base x enhancement)")
    t = np.asarray(side_map, dtype=np.int64)
    if t.shape != (joint.shape[0],):
        raise ContractError("side_map must give one symbol per base symbol")
    if t.min() < 0:
        raise ContractError("side_map symbols must be >= 0")

    nt = int(t.max()) + 1
    joint_side_enh = np.zeros((nt, joint.shape[1]))
    for b in range(joint.shape[0]):
        joint_side_enh[t[b]] += joint[b]

    h_base = entropy(joint.sum(axis=1))
    h_enh = entropy(joint.sum(axis=0))
    h_side = entropy(joint_side_enh.sum(axis=1))
    h_enh_given_side = conditional_entropy(joint_side_enh, axis=0)
    mi = mutual_information(joint_side_enh)
    h_side_given_enh = conditional_entropy(joint_side_enh, axis=1)

    lower_slack = (h_base + h_enh_given_side) - h_enh
    upper_slack = h_enh - h_enh_given_side
    side_slack = h_base - h_side
    identity = lower_slack - (h_side_given_enh + h_base - h_side)
    return ConditionalBoundsReport(
        h_base=h_base, h_enh=h_enh, h_side=h_side,
        h_enh_given_side=h_enh_given_side, mi_enh_side=mi,
        lower_slack=lower_slack, upper_slack=upper_slack,
        side_slack=side_slack, lower_slack_identity=identity,
    )


def random_conditional_instance(rng, max_alphabet=16):
    nb = int(rng.integers(2, max_alphabet + 1))
    nc = int(rng.integers(2, max_alphabet + 1))
    joint = rng.exponential(1.0, size=(nb, nc))
    joint /= joint.sum()
    nt = int(rng.integers(1, nb + 1))
    side_map = rng.integers(0, nt, size=nb)
    return joint, side_map


# ---------------------------------------------------------------------------
# residual-coding identities


@dataclass(frozen=True)
class ResidualIdentityReport:
    h_source: float
    h_prediction: float
    h_residual: float
    h_source_given_prediction: float
    h_residual_given_prediction: float
    mi_prediction_residual: float
    shift_invariance_error: float   # H(X|Xp) - H(Xr|Xp)
    decorrelation_error: float      # H(X|Xp) - (H(Xr) - I(Xp;Xr))


def check_residual_identities(joint, source_values, prediction_values):
    """joint[i, j] = P(X = source_values[i], Xp = prediction_values[j]);
    the residual variable is Xr = X - Xp, formed on the integer value grids."""
    arr = _check_pmf(joint)
    if arr.ndim != 2:
        raise ContractError("joint must be 2-D (source x prediction)")
    xv = np.asarray(source_values, dtype=np.int64)
    pv = np.asarray(prediction_values, dtype=np.int64)
    if xv.shape != (arr.shape[0],) or pv.shape != (arr.shape[1],):
        raise ContractError("value grids must match the joint's axes")
    if len(set(xv.tolist())) != xv.size or len(set(pv.tolist())) != pv.size:
        raise ContractError("value grids must be distinct")

    residuals = sorted({int(x - p) for x in xv for p in pv})
    rindex = {r: k for k, r in enumerate(residuals)}
    joint_res_pred = np.zeros((len(residuals), pv.size))
    for i, x in enumerate(xv):
        for j, p in enumerate(pv):
            joint_res_pred[rindex[int(x - p)], j] += arr[i, j]

    h_source = entropy(arr.sum(axis=1))
    h_pred = entropy(arr.sum(axis=0))
    h_res = entropy(joint_res_pred.sum(axis=1))
    h_src_given_pred = conditional_entropy(arr.T, axis=0)
    h_res_given_pred = conditional_entropy(joint_res_pred.T, axis=0)
    mi = mutual_information(joint_res_pred.T)
    return ResidualIdentityReport(
        h_source=h_source, h_prediction=h_pred, h_residual=h_res,
        h_source_given_prediction=h_src_given_pred,
        h_residual_given_prediction=h_res_given_pred,
        mi_prediction_residual=mi,
        shift_invariance_error=h_src_given_pred - h_res_given_pred,
        decorrelation_error=h_src_given_pred - (h_res - mi),
    )


def random_residual_instance(rng, max_alphabet=12):
    nx = int(rng.integers(2, max_alphabet + 1))
    npred = int(rng.integers(2, max_alphabet + 1))
    joint = rng.exponential(1.0, size=(nx, npred))
    joint /= joint.sum()
    xv = rng.choice(np.arange(-16, 17), size=nx, replace=False)
    pv = rng.choice(np.arange(-16, 17), size=npred, replace=False)
    return joint, np.sort(xv), np.sort(pv)


def sweep(instances, seed):
    """Runs both labs on `instances` paired random instances; one combined
    record per instance id."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(instances):
        joint, side_map = random_conditional_instance(rng)
        cond = check_conditional_bounds(joint, side_map)
        joint_r, xv, pv = random_residual_instance(rng)
        resid = check_residual_identities(joint_r, xv, pv)
        records.append((i, cond, resid))
    return records


def sweep_csv(records):
    cols = [
        "instance", "h_base", "h_enh", "h_side", "h_enh_given_side",
        "mi_enh_side", "lower_slack", "upper_slack", "side_slack",
        "lower_slack_identity", "h_source", "h_prediction", "h_residual",
        "h_source_given_prediction", "h_residual_given_prediction",
        "mi_prediction_residual", "shift_invariance_error",
        "decorrelation_error",
    ]
    lines = [",".join(cols)]
    for i, cond, resid in records:
        vals = [i, cond.h_base, cond.h_enh, cond.h_side, cond.h_enh_given_side,
                cond.mi_enh_side, cond.lower_slack, cond.upper_slack,
                cond.side_slack, cond.lower_slack_identity,
                resid.h_source, resid.h_prediction, resid.h_residual,
                resid.h_source_given_prediction,
                resid.h_residual_given_prediction,
                resid.mi_prediction_residual, resid.shift_invariance_error,
                resid.decorrelation_error]
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in vals))
    return "\n".join(lines) + "\n"
