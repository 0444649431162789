"""Loss terms and the combined training objective.

The total objective is the sum of an instance-level distillation term on
the masked anchor view, a cross-site consistency term pulling the sibling
view toward the anchor's teacher targets, a masked patch-level
distillation term, and a nearest-neighbour spreading regulariser:

    total = CE(s(v1_masked), t(v1)) + w_local * CE(s(v2), t(v1))
            + lambda1 * patch_CE_at_masked_positions
            + lambda2 * koleo(stacked student CLS embeddings of v1, v2)

Teacher outputs are always treated as constants; no gradient reaches them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ValidationError

KOLEO_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # patch-level term
    lambda2: float = 0.1  # spreading regulariser
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    local_agg_weight: float = 1.0  # 1.0 is the standard objective; 0 ablates it

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.local_agg_weight < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValidationError("temperatures must be > 0")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValidationError("center_momentum must be in [0, 1)")


@dataclass
class CenterState:
    """Running means of teacher logits, one per output stream."""

    instance: np.ndarray
    patch: np.ndarray

    @classmethod
    def zeros(cls, n_prototypes: int, dtype=np.float32) -> "CenterState":
        return cls(
            instance=np.zeros(n_prototypes, dtype=dtype),
            patch=np.zeros(n_prototypes, dtype=dtype),
        )


def _as_const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _teacher_probs(logits: np.ndarray, center: np.ndarray, tau_t: float) -> np.ndarray:
    z = (logits - center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _soft_cross_entropy(
    student_logits: Tensor, teacher_probs: np.ndarray, tau_s: float
) -> Tensor:
    logp = ag.log_softmax(ag.scale(student_logits, 1.0 / tau_s))
    per_row = ag.sum_(ag.mul(logp, Tensor(teacher_probs)), axis=-1)
    return ag.neg(ag.mean(per_row))


def dino_loss(
    student_logits, teacher_logits, center, tau_s: float, tau_t: float
) -> Tensor:
    """Instance-level distillation: cross-entropy from centred, sharpened
    teacher distributions to the student's, averaged over the batch.

    Accepts a single logit vector or a batch; the teacher side never
    receives gradients.
    """
    student = ag.as_tensor(student_logits)
    teacher = _as_const(teacher_logits)
    if student.data.ndim == 1:
        student = ag.reshape(student, (1, -1))
        teacher = teacher.reshape(1, -1)
    if student.shape[-1] != teacher.shape[-1]:
        raise ValidationError("student/teacher prototype dimensions differ")
    if not np.isfinite(teacher).all() or not np.isfinite(student.data).all():
        raise ValidationError("non-finite logits")
    probs = _teacher_probs(teacher, _as_const(center), tau_t)
    return _soft_cross_entropy(student, probs, tau_s)


def ibot_loss(
    student_patch_logits,
    teacher_patch_logits,
    mask,
    patch_center,
    tau_s: float,
    tau_t: float,
) -> Tensor:
    """Patch-level distillation at masked positions only.

    ``student_patch_logits`` come from the masked view, the teacher targets
    from the unmasked view at the same positions; the result is averaged
    over all masked positions in the batch and is 0 for an empty mask.

    Logits may cover the full patch grid ((B, N, K), or (N, K) for a single
    image), or just the masked positions as an (M, K) matrix in row-major
    mask order; both give identical values.
    """
    student = ag.as_tensor(student_patch_logits)
    teacher = _as_const(teacher_patch_logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask.reshape(1, -1)
    if student.data.shape != teacher.shape:
        raise ValidationError(
            f"student/teacher patch logits differ: {student.data.shape} vs {teacher.shape}"
        )
    n_masked = int(mask.sum())
    if n_masked == 0:
        return Tensor(np.zeros((), dtype=student.data.dtype))

    if student.data.ndim == 2 and student.data.shape[0] == n_masked:
        picked, targets = student, teacher  # pre-gathered masked rows
    else:
        if student.data.ndim == 2:
            student = ag.reshape(student, (1,) + student.data.shape)
            teacher = teacher.reshape((1,) + teacher.shape)
        if mask.shape != student.data.shape[:2]:
            raise ValidationError(f"mask shape {mask.shape} does not match logits")
        b_idx, n_idx = np.nonzero(mask)
        picked = ag.getitem(student, (b_idx, n_idx))
        targets = teacher[b_idx, n_idx]
    probs = _teacher_probs(targets, _as_const(patch_center), tau_t)
    return _soft_cross_entropy(picked, probs, tau_s)


def koleo_loss(embeddings) -> Tensor:
    """Nearest-neighbour log-distance spreading regulariser.

    Rows are L2-normalised; the loss is -mean_i log(d_i + eps) where d_i is
    the distance from row i to its nearest other row. Lower values mean
    better-spread embeddings.
    """
    x = ag.as_tensor(embeddings)
    n = x.data.shape[0]
    if x.data.ndim != 2 or n < 2:
        raise ValidationError("koleo needs a 2-D batch with at least 2 rows")
    xn = ag.l2_normalize(x)
    sims = xn.data @ xn.data.T
    np.fill_diagonal(sims, -np.inf)
    nn_idx = sims.argmax(axis=1)  # max cosine = min distance on the sphere
    diff = ag.sub(xn, ag.getitem(xn, (nn_idx,)))
    dists = ag.sqrt(ag.sum_(ag.mul(diff, diff), axis=-1))
    return ag.neg(ag.mean(ag.log(ag.add(dists, Tensor(np.asarray(KOLEO_EPS, dtype=x.data.dtype))))))


def update_center(
    center: CenterState,
    instance_logits,
    patch_logits,
    momentum: float,
) -> CenterState:
    """EMA of teacher logit batch means, per stream.

    ``patch_logits`` may be None to leave the patch stream unchanged (e.g.
    when no positions were masked this step).
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError("momentum must be in [0, 1]")

    def blend(vec: np.ndarray, batch) -> np.ndarray:
        batch = _as_const(batch)
        if batch.size == 0:
            return vec.copy()
        flat = batch.reshape(-1, batch.shape[-1])
        return (momentum * vec + (1.0 - momentum) * flat.mean(axis=0)).astype(vec.dtype)

    new_instance = blend(center.instance, instance_logits)
    new_patch = (
        center.patch.copy() if patch_logits is None else blend(center.patch, patch_logits)
    )
    return CenterState(instance=new_instance, patch=new_patch)


@dataclass
class ViewTokens:
    """Outputs of one forward pass, as needed by the objective."""

    cls_embed: Tensor | np.ndarray | None = None
    cls_logits: Tensor | np.ndarray | None = None
    patch_logits: Tensor | np.ndarray | None = None


def total_loss(
    student_masked: ViewTokens,
    student_v1: ViewTokens,
    student_v2: ViewTokens,
    teacher_v1: ViewTokens,
    mask: np.ndarray,
    weights: LossWeights,
    center: CenterState,
) -> tuple[Tensor, dict[str, float]]:
    """Combine the four terms; returns (loss tensor, per-term values).

    The component map holds unweighted term values; applying the weights
    and summing reproduces the total exactly.
    """
    term_dino = dino_loss(
        student_masked.cls_logits,
        teacher_v1.cls_logits,
        center.instance,
        weights.tau_s,
        weights.tau_t,
    )
    term_local = dino_loss(
        student_v2.cls_logits,
        teacher_v1.cls_logits,
        center.instance,
        weights.tau_s,
        weights.tau_t,
    )
    term_ibot = ibot_loss(
        student_masked.patch_logits,
        teacher_v1.patch_logits,
        mask,
        center.patch,
        weights.tau_s,
        weights.tau_t,
    )
    stacked = ag.concat(
        [ag.as_tensor(student_v1.cls_embed), ag.as_tensor(student_v2.cls_embed)], axis=0
    )
    term_koleo = koleo_loss(stacked)

    total = ag.add(
        ag.add(term_dino, ag.scale(term_local, weights.local_agg_weight)),
        ag.add(
            ag.scale(term_ibot, weights.lambda1), ag.scale(term_koleo, weights.lambda2)
        ),
    )
    components = {
        "dino": term_dino.item(),
        "local_agg": term_local.item(),
        "ibot": term_ibot.item(),
        "koleo": term_koleo.item(),
        "total": total.item(),
    }
    return total, components
