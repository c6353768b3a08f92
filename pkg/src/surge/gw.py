"""Entropic Gromov-Wasserstein between two small metric spaces.

The squared-loss GW objective for a coupling ``T`` between uniform weights
``p`` and ``q`` is::

    sum_{i,j,k,l} (D1[i,k] - D2[j,l])**2 * T[i,j] * T[k,l]
      = <c(D1, D2) - 2 * D1 @ T @ D2.T, T>

with ``c = (D1**2 @ p)[:, None] + (D2**2 @ q)[None, :]``.  The solver
linearises the objective at the current coupling and takes an entropic
mirror step by running Sinkhorn on the gradient cost, which is the usual
projected-gradient scheme for entropic GW.
"""
from dataclasses import asdict, dataclass

import torch

from .exceptions import ConfigurationError, NumericalDivergenceError, ShapeError

SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class GwSolverParams:
    epsilon: float = 1e-2
    outer_iters: int = 20
    sinkhorn_iters: int = 50
    loss_exponent: int = 2
    identity_bias: float = 0.1
    refine_epsilon: float = 1e-3
    refine_iters: int = 10
    anchored_starts: bool = True

    def __post_init__(self):
        if self.epsilon <= 0 or self.outer_iters < 1 or self.sinkhorn_iters < 1:
            raise ConfigurationError("GW solver parameters must be positive")
        if self.refine_epsilon <= 0 or self.refine_iters < 0:
            raise ConfigurationError("refinement parameters must be positive")
        if self.loss_exponent != 2:
            raise ConfigurationError("only the squared GW loss is supported")
        if not 0.0 <= self.identity_bias < 1.0:
            raise ConfigurationError("identity_bias must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class CouplingMatrix:
    gamma: torch.Tensor
    row_marginal: torch.Tensor
    col_marginal: torch.Tensor

    def marginal_error(self):
        rows = (self.gamma.sum(1) - self.row_marginal).abs().max()
        cols = (self.gamma.sum(0) - self.col_marginal).abs().max()
        return float(torch.maximum(rows, cols))


def _check_distance_matrix(d, name):
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {tuple(d.shape)}")
    if d.shape[0] < 2:
        raise ShapeError(f"{name} needs at least two points")
    if not torch.allclose(d, d.T, atol=SYMMETRY_TOL, rtol=0.0):
        raise ShapeError(f"{name} is not symmetric")


def gw_tensor(d1, d2, gamma, p, q):
    """Linearised cost ``c(D1, D2) - 2 D1 gamma D2^T``; half the objective gradient.

    ``gamma`` may carry leading batch dimensions (one coupling per start).
    """
    const = (d1 ** 2 @ p)[:, None] + (d2 ** 2 @ q)[None, :]
    return const - 2.0 * d1 @ gamma @ d2.T


def gw_objective(d1, d2, gamma):
    """Quadratic GW objective at a fixed coupling, differentiable in ``d1``/``d2``."""
    p, q = gamma.sum(-1), gamma.sum(-2)
    const = (d1 ** 2 @ p.unsqueeze(-1)) + (q.unsqueeze(-2) @ (d2 ** 2).T)
    return ((const - 2.0 * d1 @ gamma @ d2.T) * gamma).sum((-2, -1))


def gw_objective_bruteforce(d1, d2, gamma):
    """Direct four-index sum of the GW objective (for checking)."""
    diff = (d1[:, None, :, None] - d2[None, :, None, :]) ** 2
    return torch.einsum("ijkl,ij,kl->", diff, gamma, gamma)


def sinkhorn_log(cost, p, q, epsilon, n_iters, tol=1e-12):
    """Log-domain Sinkhorn for a (..., n, m) stack of costs.

    After the scaling iterations each plan is rounded onto the transport
    polytope (Altschuler, Weed & Rigollet 2017), so both marginals hold to
    round-off even if Sinkhorn stopped early.
    """
    log_p, log_q = torch.log(p), torch.log(q)
    neg = -cost / epsilon
    f = torch.zeros(cost.shape[:-1], dtype=cost.dtype)
    g = torch.zeros(cost.shape[:-2] + cost.shape[-1:], dtype=cost.dtype)
    for _ in range(n_iters):
        f = epsilon * (log_p - torch.logsumexp(neg + g.unsqueeze(-2) / epsilon, dim=-1))
        g = epsilon * (log_q - torch.logsumexp(neg + f.unsqueeze(-1) / epsilon, dim=-2))
        plan = torch.exp(neg + (f.unsqueeze(-1) + g.unsqueeze(-2)) / epsilon)
        if (plan.sum(-1) - p).abs().max() < tol:
            break
    return round_to_marginals(plan, p, q)


def round_to_marginals(plan, p, q):
    """Project positive plans onto ``{T >= 0 : T 1 = p, T^T 1 = q}``."""
    plan = plan * torch.clamp(p / plan.sum(-1), max=1.0).unsqueeze(-1)
    plan = plan * torch.clamp(q / plan.sum(-2), max=1.0).unsqueeze(-2)
    # both residuals are >= 0 in exact arithmetic; clip round-off
    err_r = torch.clamp(p - plan.sum(-1), min=0.0)
    err_c = torch.clamp(q - plan.sum(-2), min=0.0)
    mass = err_r.abs().sum(-1, keepdim=True).unsqueeze(-1)
    correction = err_r.unsqueeze(-1) * err_c.unsqueeze(-2) / torch.clamp(mass, min=1e-300)
    return plan + correction


def _profile_cost(d1, d2):
    """Squared distance between the per-point distance quantile functions."""
    k = max(d1.shape[0], d2.shape[0])
    levels = torch.linspace(0.0, 1.0, k, dtype=d1.dtype)
    q1 = torch.quantile(d1, levels, dim=1).T
    q2 = torch.quantile(d2, levels, dim=1).T
    return ((q1[:, None, :] - q2[None, :, :]) ** 2).mean(-1)


def _initial_couplings(d1, d2, p, q, params):
    """Stack of starting couplings.

    Start 0 solves an entropic OT problem on the distance-profile cost and
    mixes in ``identity_bias`` of the diagonal coupling (which also breaks
    ties in symmetric problems).  With ``anchored_starts`` every pair of
    anchor points ``(a, b)`` adds a start that matches points by how far
    they lie from their anchor.  The set of anchored starts is closed under
    relabeling, so the best of them does not depend on point order.
    """
    n, m = d1.shape[0], d2.shape[0]
    first = sinkhorn_log(_profile_cost(d1, d2), p, q, params.epsilon, params.sinkhorn_iters)
    if n == m and params.identity_bias > 0:
        first = (1 - params.identity_bias) * first + params.identity_bias * torch.diag(p)
    starts = [first.unsqueeze(0)]
    if params.anchored_starts:
        cost = (d1[:, None, :, None] - d2[None, :, None, :]) ** 2
        cost = cost.reshape(n * m, n, m)
        starts.append(sinkhorn_log(cost, p, q, params.epsilon, params.sinkhorn_iters))
    return torch.cat(starts)


def gw_distance(d1, d2, params=None):
    """Approximately solve squared-loss GW with uniform marginals.

    Every start is iterated ``outer_iters`` times at ``epsilon`` and then
    ``refine_iters`` times at ``refine_epsilon``, which sharpens the
    coupling so the entropic blur does not inflate the reported value.
    Returns ``(value, CouplingMatrix)`` for the start with the lowest
    quadratic objective (entropy term excluded).  Works on float64 copies of
    the inputs and never tracks gradients.
    """
    params = params or GwSolverParams()
    with torch.no_grad():
        d1 = torch.as_tensor(d1).detach().double()
        d2 = torch.as_tensor(d2).detach().double()
        _check_distance_matrix(d1, "d1")
        _check_distance_matrix(d2, "d2")
        n, m = d1.shape[0], d2.shape[0]
        p = torch.full((n,), 1.0 / n, dtype=torch.float64)
        q = torch.full((m,), 1.0 / m, dtype=torch.float64)
        gamma = _initial_couplings(d1, d2, p, q, params)
        schedule = [params.epsilon] * params.outer_iters + [params.refine_epsilon] * params.refine_iters
        for it, eps in enumerate(schedule):
            cost = 2.0 * gw_tensor(d1, d2, gamma, p, q)
            gamma = sinkhorn_log(cost, p, q, eps, params.sinkhorn_iters)
            if not torch.isfinite(gamma).all():
                raise NumericalDivergenceError(
                    f"non-finite coupling at GW outer iteration {it}", iteration=it)
        values = gw_objective(d1, d2, gamma)
        if torch.isnan(values).all():
            raise NumericalDivergenceError("GW objective is NaN", iteration=len(schedule) - 1)
        best = int(torch.argmin(torch.nan_to_num(values, nan=float("inf"))))
        value = float(values[best])
    # the quadratic form is a sum of non-negative terms; clip round-off
    return max(value, 0.0), CouplingMatrix(gamma[best], p, q)
