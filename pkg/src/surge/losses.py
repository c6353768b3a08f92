"""Generator and critic objectives.

All functions operate on torch tensors and are differentiable where a
gradient is needed for training.  Image batches are NCHW.
"""
import math
from dataclasses import asdict, dataclass

import torch

from .exceptions import NumericalDivergenceError, PreconditionError, ShapeError
from .gw import GwSolverParams, gw_distance, gw_objective

PROB_FLOOR = 1e-7
DIST_EPS = 1e-8
SQRT_SMOOTHING = 1e-12


@dataclass
class LossReport:
    l_adv: float
    l_js: float
    l_gw: float
    w_a: float
    w_js: float
    w_gw: float
    l_g_combined: float
    l_d: float
    gp_term: float

    def to_record(self, epoch, batch):
        """Loss-log line as a JSON-ready dict."""
        return {
            "epoch": epoch, "batch": batch,
            "l_adv": self.l_adv, "l_js": self.l_js, "l_gw": self.l_gw,
            "w_a": self.w_a, "w_js": self.w_js, "w_gw": self.w_gw,
            "l_g": self.l_g_combined, "l_d": self.l_d, "gp": self.gp_term,
        }

    def to_dict(self):
        return asdict(self)


def adversarial_loss_g(d_probs):
    """Batch mean of ``-log D(G(x))`` with probabilities floored at 1e-7."""
    return -torch.log(torch.clamp(d_probs, min=PROB_FLOOR)).mean()


def flatten_to_distribution(images, eps=DIST_EPS):
    """Flatten each image of a batch and normalise it to a probability vector.

    ``images`` has shape (N, ...) and the result (N, M).  ``eps`` is added
    to every entry before normalising so that no entry is zero.
    """
    flat = images.reshape(images.shape[0], -1) + eps
    return flat / flat.sum(dim=1, keepdim=True)


def _kl_to_mixture(p, m):
    # 0 * log(0 / m) is taken as 0
    ratio = torch.where(p > 0, p / m, torch.ones_like(p))
    return (p * torch.log(ratio)).sum(dim=-1)


def js_divergence(p, q):
    """Jensen-Shannon divergence (natural log) along the last axis."""
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    m = 0.5 * (p + q)
    return 0.5 * _kl_to_mixture(p, m) + 0.5 * _kl_to_mixture(q, m)


def clamp_straight_through(x, lo=0.0, hi=1.0):
    """Clamp in the forward pass, identity in the backward pass."""
    return x + (x.clamp(lo, hi) - x).detach()


def js_loss(sr, hr, eps=DIST_EPS):
    """Mean JS divergence between each SR image and its HR counterpart.

    Raw generator output may leave [0, 1]; it is clamped before being read
    as intensities, with the gradient passed straight through so that
    out-of-range pixels are still pulled towards the target.
    """
    if sr.shape != hr.shape:
        raise ShapeError(f"SR and HR batches differ: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    p = flatten_to_distribution(clamp_straight_through(sr), eps)
    return js_divergence(p, flatten_to_distribution(hr, eps)).mean()


def pairwise_distance_matrix(points):
    """Max-normalised Euclidean distance matrix of the rows of ``points``.

    Rows are flattened first.  The square root is smoothed so the gradient
    stays finite for coincident points while the diagonal stays exactly 0.
    """
    x = points.reshape(points.shape[0], -1)
    if x.shape[0] < 2:
        raise PreconditionError("pairwise distances need at least two points")
    sq = (x[:, None, :] - x[None, :, :]).pow(2).sum(-1)
    d = torch.sqrt(sq + SQRT_SMOOTHING) - math.sqrt(SQRT_SMOOTHING)
    d = d * (1.0 - torch.eye(x.shape[0], dtype=d.dtype, device=d.device))
    return d / torch.clamp(d.max(), min=SQRT_SMOOTHING)


def gw_loss(sr, lr, params=None, return_coupling=False):
    """Gromov-Wasserstein loss between the LR batch and the SR batch.

    The coupling is solved without gradient tracking and then held fixed,
    so the gradient reaches ``sr`` only through its distance matrix.
    """
    if sr.shape[0] != lr.shape[0]:
        raise ShapeError("SR and LR batches must have the same size")
    if sr.shape[0] < 2:
        raise PreconditionError("GW loss needs a batch of at least two images")
    d1 = pairwise_distance_matrix(lr.detach()).double()
    d2 = pairwise_distance_matrix(sr)
    _, coupling = gw_distance(d1, d2.detach(), params)
    gamma = coupling.gamma.to(d2.dtype)
    value = gw_objective(d1.to(d2.dtype), d2, gamma)
    return (value, coupling) if return_coupling else value


def dynamic_weights(losses):
    """Softmax of the (detached) loss values."""
    vals = torch.stack([torch.as_tensor(l).detach().reshape(()) for l in losses]).double()
    if torch.isnan(vals).any():
        raise NumericalDivergenceError("NaN loss passed to dynamic weighting")
    return torch.softmax(vals, dim=0)


def dynamic_combine(l_a, l_js, l_gw):
    """Combine the three generator losses with softmax-of-value weights.

    The weights are constants for autograd.  Returns ``(l_g, weights)``.
    """
    losses = [torch.as_tensor(l) for l in (l_a, l_js, l_gw)]
    w = dynamic_weights(losses)
    l_g = sum(wi.to(l.dtype) * l for wi, l in zip(w, losses))
    return l_g, w


def gradient_penalty(critic, real, fake, lam=10.0, generator=None):
    """``lam * mean((||grad critic(x_hat)||_2 - 1)^2)`` at random interpolates.

    One mixing coefficient is drawn per sample from U(0, 1) using
    ``generator``.  ``critic`` maps an (N, ...) batch to N scores.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real and fake batches differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    n = real.shape[0]
    eps = torch.rand(n, generator=generator, dtype=real.dtype, device=real.device)
    eps = eps.reshape(n, *([1] * (real.ndim - 1)))
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    out = critic(x_hat)
    grad = None
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(n, -1).norm(2, dim=1)
    return lam * ((norms - 1.0) ** 2).mean()


def discriminator_loss(d_real, d_fake, gp):
    """``mean(D(G(x))) - mean(D(y)) + gp`` on the critic's probabilities."""
    return d_fake.mean() - d_real.mean() + gp
