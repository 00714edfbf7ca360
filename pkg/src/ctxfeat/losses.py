"""Training objectives for joint detection and description.

The descriptor objective is a triplet loss over attention-weighted
descriptors x_i = w_i * d_i with in-batch hardest-negative mining and a
softmax term that redistributes loss weight across samples by attention
score. The detector objective is a class-weighted binary cross-entropy.
Gradient checks against central finite differences are provided as a
verification surface for both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 15.0
    margin: float = 1.0
    bce_weight: float = 200.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.bce_weight <= 0:
            raise ValueError(f"bce_weight must be > 0, got {self.bce_weight}")


UNIT_NORM_TOL = 1e-4


@dataclass
class CorrespondenceBatch:
    """N matched point pairs with their descriptors and attention scores.

    desc_a/desc_b are (N, D) rows of unit norm (within 1e-4), att_a/att_b
    are (N,) strictly positive scores. points_a/points_b, when given, are
    the (N, 2) pixel coordinates the rows were sampled at.
    """

    desc_a: torch.Tensor
    desc_b: torch.Tensor
    att_a: torch.Tensor
    att_b: torch.Tensor
    points_a: torch.Tensor | None = None
    points_b: torch.Tensor | None = None

    def __post_init__(self):
        with torch.no_grad():
            n = self.desc_a.shape[0]
            if n < 2:
                raise ValueError(f"need at least 2 correspondences, got {n}")
            for name in ("desc_a", "desc_b", "att_a", "att_b"):
                t = getattr(self, name)
                if not torch.isfinite(t).all():
                    raise ValueError(f"{name} contains non-finite values")
            if self.desc_b.shape != self.desc_a.shape:
                raise ValueError("desc_a and desc_b shapes differ")
            if self.att_a.shape != (n,) or self.att_b.shape != (n,):
                raise ValueError("attention scores must be shape (N,)")
            for name in ("desc_a", "desc_b"):
                norms = getattr(self, name).norm(dim=1)
                worst = (norms - 1.0).abs().max().item()
                if worst > UNIT_NORM_TOL:
                    raise ValueError(
                        f"{name} rows must be unit norm within {UNIT_NORM_TOL}; "
                        f"worst deviation {worst:.2e}"
                    )
            if (self.att_a <= 0).any() or (self.att_b <= 0).any():
                raise ValueError("attention scores must be strictly positive")

    def __len__(self) -> int:
        return self.desc_a.shape[0]

    @property
    def weighted_a(self) -> torch.Tensor:
        return self.att_a.unsqueeze(1) * self.desc_a

    @property
    def weighted_b(self) -> torch.Tensor:
        return self.att_b.unsqueeze(1) * self.desc_b


# floor under squared distances before sqrt: the derivative of sqrt blows
# up at 0, and both exact-duplicate negatives (repeated texture) and fully
# converged positives do reach 0 in float32
DISTANCE_FLOOR = 1e-12


def positive_distances(batch: CorrespondenceBatch) -> torch.Tensor:
    """Per-pair distance between corresponding weighted descriptors."""
    diff = batch.weighted_a - batch.weighted_b
    return diff.square().sum(dim=1).clamp_min(DISTANCE_FLOOR).sqrt()


def weighted_distance_matrix(
    batch: CorrespondenceBatch, block: int = 64
) -> torch.Tensor:
    """(N, N) matrix of || w_i d_i - w'_j d'_j || over the batch.

    Computed as the exact elementwise definition (no norm-expansion
    shortcut), in row blocks to bound peak memory at large N.
    """
    xa = batch.weighted_a
    xb = batch.weighted_b
    n = xa.shape[0]
    rows = []
    for start in range(0, n, block):
        diff = xa[start : start + block].unsqueeze(1) - xb.unsqueeze(0)
        rows.append(diff.square().sum(dim=2).clamp_min(DISTANCE_FLOOR).sqrt())
    return torch.cat(rows, dim=0)


def hardest_negative_distances(batch: CorrespondenceBatch) -> torch.Tensor:
    """Per-row minimum cross-image distance to any non-corresponding point.

    Mining is strictly cross-image: row i competes against all columns
    j != i of the other image's weighted descriptors.
    """
    n = len(batch)
    dmat = weighted_distance_matrix(batch)
    eye = torch.eye(n, dtype=torch.bool, device=dmat.device)
    return dmat.masked_fill(eye, float("inf")).min(dim=1).values


def attention_softmax(att: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax of attention scores at the given temperature; sums to 1."""
    return torch.softmax(att / temperature, dim=0)


def descriptor_loss_from_distances(
    pos: torch.Tensor,
    neg: torch.Tensor,
    att: torch.Tensor,
    cfg: LossConfig,
) -> torch.Tensor:
    """Attention-softmax-weighted sum of hinge triplet terms."""
    weights = attention_softmax(att, cfg.temperature)
    terms = torch.clamp_min(pos - neg + cfg.margin, 0.0)
    return (weights * terms).sum()


def descriptor_loss(batch: CorrespondenceBatch, cfg: LossConfig) -> torch.Tensor:
    """Full descriptor objective over a correspondence batch.

    Differentiable w.r.t. descriptors and attention scores of both images.
    """
    pos = positive_distances(batch)
    neg = hardest_negative_distances(batch)
    return descriptor_loss_from_distances(pos, neg, batch.att_a, cfg)


BCE_EPS = 1e-6


def weighted_bce(
    k: torch.Tensor | float,
    g: torch.Tensor | float,
    positive_weight: float,
) -> torch.Tensor:
    """Per-pixel binary cross-entropy with up-weighted positives.

    Probabilities are clamped to [1e-6, 1 - 1e-6] before the logs.
    """
    k = torch.as_tensor(k)
    g = torch.as_tensor(g, dtype=k.dtype, device=k.device)
    k = k.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -positive_weight * g * torch.log(k) - (1.0 - g) * torch.log(1.0 - k)


def detector_loss(
    heatmap: torch.Tensor,
    labels: torch.Tensor,
    positive_weight: float = 200.0,
) -> torch.Tensor:
    """Mean weighted BCE between a probability heatmap and binary labels."""
    heatmap = torch.as_tensor(heatmap)
    labels = torch.as_tensor(labels)
    if heatmap.shape != labels.shape:
        raise ValueError(
            f"heatmap shape {tuple(heatmap.shape)} != labels shape {tuple(labels.shape)}"
        )
    return weighted_bce(heatmap, labels, positive_weight).mean()


def total_loss(l_det: torch.Tensor | float, l_des: torch.Tensor | float) -> torch.Tensor:
    """Unit-weight sum of the detector and descriptor objectives."""
    if not isinstance(l_det, torch.Tensor):
        l_det = torch.as_tensor(l_det, dtype=torch.float64)
    if not isinstance(l_des, torch.Tensor):
        l_des = torch.as_tensor(l_des, dtype=torch.float64)
    if not (torch.isfinite(l_det).all() and torch.isfinite(l_des).all()):
        raise ValueError("loss terms must be finite")
    return l_det + l_des


# ---------------------------------------------------------------------------
# Gradient verification against finite differences
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    """Worst-case errors from the finite-difference verification suite."""

    trials: int
    # closed-form d/dd ||w d - x+|| vs central differences, absolute
    positive_grad_max_abs_err: float
    # autodiff gradient of descriptor_loss vs central differences, per group
    group_max_abs_err: dict[str, float] = field(default_factory=dict)
    group_rel_err: dict[str, float] = field(default_factory=dict)
    degenerate_skipped: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.group_rel_err.values()) if self.group_rel_err else 0.0

    def passed(self, pos_tol: float = 1e-6, rel_tol: float = 1e-4) -> bool:
        return (
            self.positive_grad_max_abs_err < pos_tol and self.max_rel_err < rel_tol
        )

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "positive_grad_max_abs_err": self.positive_grad_max_abs_err,
            "group_max_abs_err": dict(self.group_max_abs_err),
            "group_rel_err": dict(self.group_rel_err),
            "degenerate_skipped": self.degenerate_skipped,
            "passed": self.passed(),
        }


def positive_distance_gradient(
    d: torch.Tensor, att: torch.Tensor | float, target: torch.Tensor
) -> torch.Tensor:
    """Closed-form gradient of ||w d - target|| w.r.t. the descriptor d.

    Equals w (x - target) / ||x - target|| with x = w d; undefined at
    x == target, which callers must exclude.
    """
    att = torch.as_tensor(att, dtype=d.dtype)
    x = att * d
    diff = x - target
    norm = diff.norm()
    if norm.item() == 0.0:
        raise ValueError("gradient undefined at x == target")
    return att * diff / norm


def _central_difference(fn, tensor: torch.Tensor, step: float) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.numel()):
        orig = flat[idx].item()
        flat[idx] = orig + step
        hi = fn().item()
        flat[idx] = orig - step
        lo = fn().item()
        flat[idx] = orig
        gflat[idx] = (hi - lo) / (2.0 * step)
    return grad


def _random_unit_rows(rng: torch.Generator, n: int, dim: int) -> torch.Tensor:
    d = torch.randn(n, dim, generator=rng, dtype=torch.float64)
    return d / d.norm(dim=1, keepdim=True)


def _nondegenerate(batch: CorrespondenceBatch, cfg: LossConfig, gap: float) -> bool:
    """True when the loss is smooth in a neighborhood of the batch.

    Rejects instances near the hinge kink, near ties in the hardest-negative
    argmin, or with a vanishing positive distance.
    """
    with torch.no_grad():
        pos = positive_distances(batch)
        dmat = weighted_distance_matrix(batch)
        n = len(batch)
        eye = torch.eye(n, dtype=torch.bool)
        off = dmat.masked_fill(eye, float("inf"))
        two = off.sort(dim=1).values[:, :2]
        neg = two[:, 0]
        if pos.min().item() < gap:
            return False
        if (two[:, 1] - two[:, 0]).min().item() < gap:
            return False
        if (pos - neg + cfg.margin).abs().min().item() < gap:
            return False
    return True


def _sample_check_batch(
    seed: int, n: int, dim: int, cfg: LossConfig, gap: float = 1e-3
) -> CorrespondenceBatch | None:
    rng = torch.Generator().manual_seed(seed)
    for _ in range(32):
        batch = CorrespondenceBatch(
            desc_a=_random_unit_rows(rng, n, dim),
            desc_b=_random_unit_rows(rng, n, dim),
            att_a=torch.rand(n, generator=rng, dtype=torch.float64) * 1.5 + 0.5,
            att_b=torch.rand(n, generator=rng, dtype=torch.float64) * 1.5 + 0.5,
        )
        if _nondegenerate(batch, cfg, gap):
            return batch
    return None


def check_positive_distance_gradient(
    trials: int = 100, dim: int = 4, seed: int = 0, step: float = 1e-6
) -> float:
    """Max absolute error of the closed-form positive-distance gradient.

    Compares w (x - x+) / ||x - x+|| against central finite differences of
    d -> ||w d - x+|| on random float64 instances.
    """
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(trials):
        d = _random_unit_rows(rng, 1, dim)[0]
        att = (torch.rand(1, generator=rng, dtype=torch.float64) * 1.5 + 0.5)[0]
        target = torch.randn(dim, generator=rng, dtype=torch.float64)
        if (att * d - target).norm().item() < 1e-2:
            target = target + 1.0
        analytic = positive_distance_gradient(d, att, target)
        numeric = _central_difference(lambda: (att * d - target).norm(), d, step)
        worst = max(worst, (analytic - numeric).abs().max().item())
    return worst


def check_loss_gradients(
    batch: CorrespondenceBatch, cfg: LossConfig, step: float = 1e-5
) -> tuple[dict[str, float], dict[str, float]]:
    """Autodiff gradients of descriptor_loss vs central finite differences.

    Returns (max_abs_err, rel_err) per tensor group, where the relative
    error normalizes a group's absolute error by the largest magnitude in
    its finite-difference gradient.
    """
    groups = {
        "desc_a": batch.desc_a.clone().requires_grad_(True),
        "desc_b": batch.desc_b.clone().requires_grad_(True),
        "att_a": batch.att_a.clone().requires_grad_(True),
        "att_b": batch.att_b.clone().requires_grad_(True),
    }
    live = CorrespondenceBatch(**groups)
    loss = descriptor_loss(live, cfg)
    loss.backward()

    abs_err: dict[str, float] = {}
    rel_err: dict[str, float] = {}
    for name, tensor in groups.items():
        base = tensor.detach().clone()
        mutable = {k: v.detach().clone() for k, v in groups.items()}
        mutable[name] = base

        def eval_loss():
            return descriptor_loss(CorrespondenceBatch(**mutable), cfg)

        numeric = _central_difference(eval_loss, base, step)
        analytic = tensor.grad
        err = (analytic - numeric).abs().max().item()
        scale = max(numeric.abs().max().item(), 1e-12)
        abs_err[name] = err
        rel_err[name] = err / scale
    return abs_err, rel_err


def run_gradient_checks(
    trials: int = 100,
    n: int = 8,
    dim: int = 4,
    seed: int = 0,
    cfg: LossConfig = LossConfig(),
    loss_trials: int = 20,
) -> GradientCheckReport:
    """Full finite-difference verification suite in float64."""
    pos_err = check_positive_distance_gradient(trials=trials, dim=dim, seed=seed)
    group_abs: dict[str, float] = {}
    group_rel: dict[str, float] = {}
    skipped = 0
    for t in range(loss_trials):
        batch = _sample_check_batch(seed * 10_000 + t, n, dim, cfg)
        if batch is None:
            skipped += 1
            continue
        abs_err, rel_err = check_loss_gradients(batch, cfg)
        for k, v in abs_err.items():
            group_abs[k] = max(group_abs.get(k, 0.0), v)
        for k, v in rel_err.items():
            group_rel[k] = max(group_rel.get(k, 0.0), v)
    return GradientCheckReport(
        trials=trials,
        positive_grad_max_abs_err=pos_err,
        group_max_abs_err=group_abs,
        group_rel_err=group_rel,
        degenerate_skipped=skipped,
    )
