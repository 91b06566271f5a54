"""Classification, distillation and attention-transfer objectives.

Teacher outputs are always treated as constants: they are re-wrapped as fresh
leaf tensors before use, so no gradient can reach teacher parameters even if
the caller forgot to compute them outside a tape.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError, ParameterError

_BRANCH_COUNTER: Counter | None = None


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.9
    temperature: float = 4.0
    at_beta: float = 1000.0
    switch_epoch: int | None = None

    def validate(self, total_epochs: int | None = None) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.at_beta < 0:
            raise ParameterError(f"at_beta must be >= 0, got {self.at_beta}")
        if self.switch_epoch is not None:
            if self.switch_epoch < 0:
                raise ParameterError(f"switch_epoch must be >= 0, got {self.switch_epoch}")
            if total_epochs is not None and self.switch_epoch > total_epochs:
                raise ParameterError(f"switch_epoch {self.switch_epoch} exceeds total epochs {total_epochs}")

    def distills_at(self, epoch: int) -> bool:
        """Whether the teacher terms are part of the objective at ``epoch``."""
        if self.alpha >= 1.0:
            return False
        return self.switch_epoch is None or epoch < self.switch_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        sw = d.get("switch_epoch")
        return cls(
            alpha=float(d.get("alpha", 0.9)),
            temperature=float(d.get("temperature", 4.0)),
            at_beta=float(d.get("at_beta", 1000.0)),
            switch_epoch=None if sw is None else int(sw),
        )


@contextlib.contextmanager
def count_branches() -> Iterator[Counter]:
    """Count which loss branches :func:`composite_loss` executes, keyed by ``(branch, epoch)``."""
    global _BRANCH_COUNTER
    prev, _BRANCH_COUNTER = _BRANCH_COUNTER, Counter()
    try:
        yield _BRANCH_COUNTER
    finally:
        _BRANCH_COUNTER = prev


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def soften(logits, temperature: float) -> Tensor:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return ad.exp(ad.log_softmax(logits, temperature))


def entropy(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats (0·log 0 taken as 0)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def ce_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"ce_loss: labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"ce_loss: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return ad.scale(ad.mean(ad.pick(ad.log_softmax(logits, 1.0), labels)), -1.0)


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """Batch mean of ``τ² · H(soften(teacher), soften(student))``."""
    teacher = _const(teacher_logits)
    if student_logits.shape != teacher.shape:
        raise DimensionError(f"kd_loss: student {student_logits.shape} vs teacher {teacher.shape}")
    p_t = soften(teacher, temperature)
    log_p_s = ad.log_softmax(student_logits, temperature)
    n = student_logits.shape[0]
    return ad.scale(ad.sum(ad.mul(p_t, log_p_s)), -(temperature**2) / n)


def attention_map(activation: Tensor) -> Tensor:
    """Channel-summed squared activations, flattened and L2-normalised per sample."""
    if activation.data.ndim != 4:
        raise DimensionError(f"attention_map: expected N×C×H×W activation, got {activation.shape}")
    n, _, h, w = activation.shape
    energy = ad.sum(ad.mul(activation, activation), axis=1)
    return ad.normalize_rows(ad.reshape(energy, (n, h * w)))


def at_loss(student_maps: Sequence[Tensor], teacher_maps: Sequence, beta: float) -> Tensor:
    """``β · Σ_blocks mean_batch ‖m_s − m_t‖²`` over already-normalised maps."""
    if len(student_maps) != len(teacher_maps):
        raise ConfigError(
            f"at_loss: student has {len(student_maps)} attention blocks, teacher has {len(teacher_maps)}"
        )
    bad = [
        f"block {i}: {tuple(s.shape)} vs {tuple(np.shape(t.data if isinstance(t, Tensor) else t))}"
        for i, (s, t) in enumerate(zip(student_maps, teacher_maps))
        if tuple(s.shape) != tuple(np.shape(t.data if isinstance(t, Tensor) else t))
    ]
    if bad:
        raise ConfigError("at_loss: mismatched attention maps: " + "; ".join(bad))
    if beta == 0 or not student_maps:
        return Tensor(0.0)
    total = None
    for s, t in zip(student_maps, teacher_maps):
        d = ad.sub(s, _const(t))
        term = ad.scale(ad.sum(ad.mul(d, d)), 1.0 / s.shape[0])
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, beta)


def composite_loss(student_out, teacher_out, labels, cfg: DistillConfig, epoch: int) -> Tensor:
    """``α·CE + (1−α)·KD + β·AT`` until ``cfg.switch_epoch``, plain CE afterwards.

    ``student_out``/``teacher_out`` are ``(logits, activation_maps)`` pairs.
    Activation maps are raw block outputs; attention maps are derived here.
    When distillation is off the teacher branch is not evaluated at all, so
    the result is bitwise identical to :func:`ce_loss`.
    """
    s_logits, s_maps = student_out
    if not cfg.distills_at(epoch):
        _count("ce", epoch)
        return ce_loss(s_logits, labels)
    if teacher_out is None:
        raise ConfigError(f"composite_loss: epoch {epoch} needs teacher outputs (alpha={cfg.alpha})")
    t_logits, t_maps = teacher_out
    _count("kd", epoch)
    kd = kd_loss(s_logits, t_logits, cfg.temperature)
    if cfg.alpha == 0.0:
        loss = kd
    else:
        _count("ce", epoch)
        loss = ad.add(ad.scale(ce_loss(s_logits, labels), cfg.alpha), ad.scale(kd, 1.0 - cfg.alpha))
    if cfg.at_beta > 0 and s_maps and t_maps:
        _count("at", epoch)
        at = at_loss([attention_map(m) for m in s_maps], [attention_map(_const(m)) for m in t_maps], cfg.at_beta)
        loss = ad.add(loss, at)
    return loss


def _count(branch: str, epoch: int) -> None:
    if _BRANCH_COUNTER is not None:
        _BRANCH_COUNTER[(branch, epoch)] += 1
