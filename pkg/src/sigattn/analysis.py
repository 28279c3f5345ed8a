"""Numerical checks of the sigmoid-vs-softmax Jacobian story.

Finite-difference gradients, the sigmoid derivative scan, power-iteration
spectral norms of attention-weight Jacobians, and a gradcheck harness that
binds the blocked kernels to central differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .jagged import JaggedBatch
from .kernel import TileConfig, blocked_backward_dkdv, blocked_backward_dq, blocked_forward
from .reference import AttentionConfig, weight_jacobian_row

__all__ = [
    "ProbeError",
    "GradcheckError",
    "rel_err",
    "finite_diff_gradient",
    "sigmoid_derivative_scan",
    "spectral_norm",
    "JacobianProbeReport",
    "jacobian_norm_probe",
    "composed_jacobian_probe",
    "GradcheckReport",
    "gradcheck_attention",
]


class ProbeError(RuntimeError):
    pass


class GradcheckError(AssertionError):
    pass


def rel_err(a, b, floor: float = 1e-12) -> float:
    """``max|a - b| / max(max|a|, max|b|, floor)``.

    Zero when both are exactly zero.  Using tensor-wide magnitudes keeps the
    ratio meaningful for entries that sit near zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    diff = np.max(np.abs(a - b))
    if diff == 0:
        return 0.0
    return float(diff / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def finite_diff_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            coord = tuple(int(c) for c in np.unravel_index(i, x.shape))
            raise ProbeError(f"f is not finite around coordinate {coord}: f(+h)={fp}, f(-h)={fm}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def sigmoid_derivative_scan(grid) -> tuple[float, float]:
    """Maximum of ``s(x)(1 - s(x))`` over ``grid`` and where it occurs."""
    x = np.asarray(grid, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty grid")
    p = expit(x)
    d = p * (1.0 - p)
    i = int(np.argmax(d))
    return float(d[i]), float(x[i])


def spectral_norm(a: np.ndarray, iters: int = 50, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``a.T @ a``.

    The start vector is random: the all-ones vector lies in the null space of
    every softmax Jacobian.
    """
    a = np.asarray(a, dtype=np.float64)
    if not np.any(a):
        return 0.0
    x = np.random.default_rng(seed).standard_normal(a.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        y = a.T @ (a @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        new = float(np.linalg.norm(a @ x))
        if abs(new - sigma) <= tol * max(new, 1.0):
            return new
        sigma = new
    return sigma


@dataclass
class JacobianProbeReport:
    scale_factors: list[float]
    softmax_spectral_norms: list[float]
    sigmoid_spectral_norms: list[float]
    max_score_inf_norm: list[float]
    softmax_max_offdiag: list[float] = field(default_factory=list)
    sigmoid_max_offdiag: list[float] = field(default_factory=list)
    sigmoid_max_diag: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"{'t':>10} {'|tS|_inf':>12} {'softmax':>12} {'sigmoid':>12}"]
        for row in zip(
            self.scale_factors, self.max_score_inf_norm, self.softmax_spectral_norms, self.sigmoid_spectral_norms
        ):
            lines.append("{:>10.4g} {:>12.4g} {:>12.6g} {:>12.6g}".format(*row))
        return "\n".join(lines)


def _max_offdiag(j: np.ndarray) -> float:
    return float(np.max(np.abs(j - np.diag(np.diag(j))))) if j.shape[0] > 1 else 0.0


def jacobian_norm_probe(scores_row, scale_factors) -> JacobianProbeReport:
    """Spectral norms of both weight Jacobians at ``t * scores_row``."""
    s = np.asarray(scores_row, dtype=np.float64).reshape(-1)
    report = JacobianProbeReport([], [], [], [])
    for t in scale_factors:
        st = float(t) * s
        j_soft = weight_jacobian_row(st, "softmax")
        j_sig = weight_jacobian_row(st, "sigmoid")
        report.scale_factors.append(float(t))
        report.max_score_inf_norm.append(float(np.max(np.abs(st))))
        report.softmax_spectral_norms.append(spectral_norm(j_soft))
        report.sigmoid_spectral_norms.append(spectral_norm(j_sig))
        report.softmax_max_offdiag.append(_max_offdiag(j_soft))
        report.sigmoid_max_offdiag.append(_max_offdiag(j_sig))
        report.sigmoid_max_diag.append(float(np.max(np.diag(j_sig))))
    return report


def _attention_map(x, wq, wk, wv, mechanism):
    n, d = x.shape
    s = (x @ wq) @ (x @ wk).T / np.sqrt(d)
    if mechanism == "softmax":
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
    else:
        p = expit(s - np.log(n))
    return p @ (x @ wv)


def composed_jacobian_probe(x, wq, wk, wv, scale_factors, h: float = 1e-6) -> dict:
    """Input-Jacobian spectral norm of a single-head attention map ``X -> Att(X)``
    as the query/key projections are scaled by ``t`` (finite differences).

    Returned as raw data; no growth rate is asserted.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] > 4:
        raise ValueError("composed probe is limited to n <= 4 tokens")
    out = {"scale_factors": [], "max_score_inf_norm": [], "softmax": [], "sigmoid": []}
    for t in scale_factors:
        out["scale_factors"].append(float(t))
        s = (x @ (t * wq)) @ (x @ (t * wk)).T / np.sqrt(x.shape[1])
        out["max_score_inf_norm"].append(float(np.max(np.abs(s))))
        for mech in ("softmax", "sigmoid"):
            jac = np.empty((x.size, x.size))
            flat = x.reshape(-1)
            for i in range(flat.size):
                xp = flat.copy()
                xm = flat.copy()
                xp[i] += h
                xm[i] -= h
                fp = _attention_map(xp.reshape(x.shape), t * wq, t * wk, wv, mech)
                fm = _attention_map(xm.reshape(x.shape), t * wq, t * wk, wv, mech)
                jac[:, i] = ((fp - fm) / (2 * h)).reshape(-1)
            out[mech].append(spectral_norm(jac, iters=200))
    return out


@dataclass
class GradcheckReport:
    max_rel_err_dq: float
    max_rel_err_dk: float
    max_rel_err_dv: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err_dq, self.max_rel_err_dk, self.max_rel_err_dv)

    def to_dict(self) -> dict:
        return {**asdict(self), "worst": self.worst}


def gradcheck_attention(
    batch: JaggedBatch,
    cfg: AttentionConfig,
    tiles: TileConfig,
    h: float = 1e-5,
    *,
    dO: np.ndarray | None = None,
    seed: int = 0,
    fail_above: float | None = 1e-3,
    perturb_dq: float = 0.0,
) -> GradcheckReport:
    """Compare the blocked backward kernels with central differences of
    ``sum(dO * blocked_forward(...))`` in float64.

    ``perturb_dq`` adds a constant to the analytic dQ; it exists so callers
    can confirm that a broken gradient is caught.
    """
    if batch.Z * batch.H * batch.L_q * batch.L_k > 10_000:
        raise ValueError("gradcheck instance too large (more than 1e4 score entries)")
    batch = batch.astype(np.float64)
    if dO is None:
        dO = np.random.default_rng(seed).standard_normal(batch.q.shape)
    dO = np.asarray(dO, dtype=np.float64)

    dq, _ = blocked_backward_dq(batch, cfg, tiles, dO)
    dk, dv, _ = blocked_backward_dkdv(batch, cfg, tiles, dO)
    dq = dq + perturb_dq

    def loss_wrt(name):
        def f(t):
            out, _ = blocked_forward(batch.replace(**{name: t}), cfg, tiles)
            return np.sum(dO * out)

        return f

    errs = {}
    for name, analytic in (("q", dq), ("k", dk), ("v", dv)):
        numeric = finite_diff_gradient(loss_wrt(name), getattr(batch, name), h)
        err = rel_err(analytic, numeric)
        if fail_above is not None and err > fail_above:
            idx = np.unravel_index(np.argmax(np.abs(analytic - numeric)), analytic.shape)
            raise GradcheckError(
                f"d{name.upper()} diverges from finite differences: rel err {err:.3e} "
                f"at {tuple(int(i) for i in idx)} (analytic {analytic[idx]:.6e}, numeric {numeric[idx]:.6e})"
            )
        errs[name] = err
    return GradcheckReport(errs["q"], errs["k"], errs["v"])
