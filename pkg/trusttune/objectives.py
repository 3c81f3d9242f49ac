"""Training objectives: cross-entropy, label smoothing, KL, and the regularized methods.

Every ``*_loss`` function runs its forward passes and its backward passes on a fresh
ComputeGraph, leaves parameter gradients in ``.grad`` and returns a LossReport with
the passes it used. Per optimizer step the counts are

    standard / standard_pp   1 FP, 1 BP
    r3f / r4f                2 FP, 1 BP
    smart / freelb           1+S FP, 1+S BP

The ``build_*`` functions only build the scalar loss on a given graph and are what
the gradient checks differentiate.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import PROB_FLOOR, ComputeGraph, Tensor
from .errors import ConfigError, NumericError, ShapeError
from .model import EncoderParams, HeadParams, encode_batch, head_logits

logger = logging.getLogger(__name__)

METHODS = ("standard", "standard_pp", "r3f", "r4f", "smart", "freelb")
NOISE_DISTRIBUTIONS = ("uniform", "normal")
PROJECTIONS = ("l2", "linf")
DISTRIBUTION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RegularizerConfig:
    method: str = "r3f"
    lam: float = 1.0
    noise_dist: str = "uniform"
    sigma: float = 1e-5
    epsilon: float = 1e-5
    ascent_steps: int = 1
    ascent_lr: float = 1e-3
    projection: str = "l2"
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method}; expected one of {', '.join(METHODS)}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.noise_dist not in NOISE_DISTRIBUTIONS:
            raise ConfigError(f"noise_dist must be uniform or normal, got {self.noise_dist}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.ascent_steps < 1:
            raise ConfigError(f"ascent_steps must be >= 1, got {self.ascent_steps}")
        if self.ascent_lr <= 0:
            raise ConfigError(f"ascent_lr must be > 0, got {self.ascent_lr}")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"projection must be l2 or linf, got {self.projection}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")

    @classmethod
    def from_section(cls, method: Dict[str, Any]) -> "RegularizerConfig":
        return cls(method=method["name"], lam=method["lambda"], noise_dist=method["noise_dist"],
                   sigma=method["sigma"], epsilon=method["epsilon"], ascent_steps=method["ascent_steps"],
                   ascent_lr=method["ascent_lr"], projection=method["projection"],
                   label_smoothing=method["label_smoothing"])

    @property
    def spectral(self) -> bool:
        return self.method == "r4f"


@dataclass
class LossReport:
    total: float
    task_term: float
    reg_term: float
    fp_used: int
    bp_used: int

    @property
    def xfp_used(self) -> int:
        return self.fp_used + 2 * self.bp_used


@dataclass
class Batch:
    tokens: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or self.labels.shape != (self.tokens.shape[0],):
            raise ShapeError(f"batch needs tokens (B, m) and labels (B,), got {self.tokens.shape} "
                             f"and {self.labels.shape}")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def expected_passes(method: str, ascent_steps: int = 1, lam: float = 1.0) -> Tuple[int, int]:
    """(FP, BP) one optimizer step of ``method`` records; R3F/R4F with lambda 0 cost a standard step"""
    if method in ("standard", "standard_pp"):
        return 1, 1
    if method in ("r3f", "r4f"):
        return (1, 1) if lam == 0.0 else (2, 1)
    if method in ("smart", "freelb"):
        return 1 + ascent_steps, 1 + ascent_steps
    raise ConfigError(f"unknown method {method}")


# ---------------------------------------------------------------------------
# plain numpy losses and divergences on single distributions
# ---------------------------------------------------------------------------

def _validate_distribution(p: np.ndarray, name: str = "probs") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ShapeError(f"{name} must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > DISTRIBUTION_TOLERANCE:
        raise ValueError(f"{name} is not a valid distribution (sum {p.sum():.9f})")
    return p


def cross_entropy(probs: np.ndarray, label: int) -> float:
    p = _validate_distribution(probs)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} outside [0, {p.size})")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def label_smoothing_loss(probs: np.ndarray, label: int, alpha: float) -> float:
    """Cross entropy against (1 - alpha) * onehot(label) + alpha * uniform"""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    p = _validate_distribution(probs)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} outside [0, {p.size})")
    target = np.full(p.size, alpha / p.size)
    target[label] += 1.0 - alpha
    return float(-np.sum(target * np.log(np.maximum(p, PROB_FLOOR))))


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with 0 ln 0 = 0"""
    p = _validate_distribution(p, "p")
    q = _validate_distribution(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"kl: dimension mismatch {p.shape} vs {q.shape}")
    if np.any((q == 0.0) & (p > 0.0)):
        raise NumericError("kl: q has zero mass where p is positive (infinite divergence)")
    live = p > 0.0
    terms = p[live] * (np.log(p[live]) - np.log(np.maximum(q[live], PROB_FLOOR)))
    return float(max(terms.sum(), 0.0))


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) + KL(q || p), written as sum (p - q)(ln p - ln q) so it is symmetric bitwise"""
    p = _validate_distribution(p, "p")
    q = _validate_distribution(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"symmetric_kl: dimension mismatch {p.shape} vs {q.shape}")
    if np.any((p == 0.0) != (q == 0.0)):
        raise NumericError("symmetric_kl: zero mass in one argument where the other is positive")
    log_p = np.log(np.maximum(p, PROB_FLOOR))
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    return float(np.sum((p - q) * (log_p - log_q)))


def sample_noise(shape: Tuple[int, ...], cfg: RegularizerConfig, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. N(0, sigma^2) or U(-sigma, sigma) entries from the noise stream"""
    if cfg.sigma == 0.0:
        return np.zeros(shape)
    if cfg.noise_dist == "normal":
        return rng.normal(0.0, cfg.sigma, size=shape)
    return rng.uniform(-cfg.sigma, cfg.sigma, size=shape)


def project(delta: np.ndarray, cfg: RegularizerConfig) -> np.ndarray:
    """Per-example projection onto the eps ball (L2 radius eps * sqrt(m * n), or L-inf radius eps)"""
    if cfg.projection == "linf":
        return np.clip(delta, -cfg.epsilon, cfg.epsilon)
    radius = cfg.epsilon * math.sqrt(delta.shape[-2] * delta.shape[-1])
    norms = np.sqrt(np.sum(delta * delta, axis=(-2, -1), keepdims=True))
    factor = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * factor


def _normalized(grad: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(grad * grad, axis=(-2, -1), keepdims=True))
    return np.where(norms > 0, grad / np.where(norms > 0, norms, 1.0), 0.0)


# ---------------------------------------------------------------------------
# graph losses over a batch
# ---------------------------------------------------------------------------

def _targets(labels: np.ndarray, num_classes: int, alpha: float) -> np.ndarray:
    targets = np.full((len(labels), num_classes), alpha / num_classes)
    targets[np.arange(len(labels)), labels] += 1.0 - alpha
    return targets


def graph_cross_entropy(graph: ComputeGraph, logits: Tensor, labels: np.ndarray, alpha: float = 0.0) -> Tensor:
    """Batch mean of cross entropy (label-smoothed when alpha > 0)"""
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise ValueError(f"labels outside [0, {logits.shape[-1]})")
    log_probs = graph.log_softmax(logits)
    weighted = graph.multiply(log_probs, Tensor(_targets(labels, logits.shape[-1], alpha)))
    return graph.scale(graph.sum(weighted), -1.0 / len(labels))


def graph_symmetric_kl(graph: ComputeGraph, logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Batch mean of KL_S between the two softmax outputs; gradient flows into both"""
    p = graph.softmax(logits_a)
    q = graph.softmax(logits_b)
    log_gap = graph.sub(graph.log(p, floor=PROB_FLOOR), graph.log(q, floor=PROB_FLOOR))
    return graph.mean(graph.sum(graph.multiply(graph.sub(p, q), log_gap), axis=-1))


def _forward_logits(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, tokens: np.ndarray,
                    weights: List[Tensor], perturbation: Tensor | None = None) -> Tensor:
    with graph.forward_pass():
        reps = encode_batch(encoder, tokens, graph, perturbation)
        return head_logits(head, reps, graph, weights=weights)


@dataclass
class LossTerms:
    total: Tensor
    task: Tensor
    reg: Tensor


def _combine(graph: ComputeGraph, task: Tensor, reg: Tensor, lam: float) -> LossTerms:
    return LossTerms(graph.add(task, graph.scale(reg, lam)), task, reg)


def build_standard(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, batch: Batch,
                   cfg: RegularizerConfig, weights: List[Tensor]) -> LossTerms:
    logits = _forward_logits(graph, encoder, head, batch.tokens, weights)
    task = graph_cross_entropy(graph, logits, batch.labels, cfg.label_smoothing)
    zero = Tensor(0.0)
    return LossTerms(task, task, zero)


def build_r3f(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, batch: Batch,
              cfg: RegularizerConfig, noise: np.ndarray, weights: List[Tensor]) -> LossTerms:
    """CE(g.f(x)) + lambda * KL_S(g.f(x), g.f(x + z)) with z fixed"""
    clean = _forward_logits(graph, encoder, head, batch.tokens, weights)
    noisy = _forward_logits(graph, encoder, head, batch.tokens, weights, Tensor(noise))
    task = graph_cross_entropy(graph, clean, batch.labels, cfg.label_smoothing)
    return _combine(graph, task, graph_symmetric_kl(graph, clean, noisy), cfg.lam)


def build_smart(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, batch: Batch,
                cfg: RegularizerConfig, delta: np.ndarray, weights: List[Tensor]) -> LossTerms:
    """SMART outer loss with the adversarial perturbation held constant"""
    clean = _forward_logits(graph, encoder, head, batch.tokens, weights)
    adversarial = _forward_logits(graph, encoder, head, batch.tokens, weights, Tensor(delta))
    task = graph_cross_entropy(graph, clean, batch.labels, cfg.label_smoothing)
    return _combine(graph, task, graph_symmetric_kl(graph, clean, adversarial), cfg.lam)


def build_freelb(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, batch: Batch,
                 cfg: RegularizerConfig, deltas: Sequence[np.ndarray], weights: List[Tensor]) -> LossTerms:
    """Average task loss over a fixed perturbation trajectory"""
    losses = [graph_cross_entropy(graph, _forward_logits(graph, encoder, head, batch.tokens, weights, Tensor(d)),
                                  batch.labels, cfg.label_smoothing) for d in deltas]
    total = losses[0]
    for loss in losses[1:]:
        total = graph.add(total, loss)
    total = graph.scale(total, 1.0 / len(losses))
    return LossTerms(total, total, Tensor(0.0))


def _check_head(head: HeadParams, cfg: RegularizerConfig) -> None:
    if cfg.method == "r4f" and not head.spectral_enabled:
        raise ConfigError("r4f requires a spectrally normalized head")


def _report(graph: ComputeGraph, terms: LossTerms) -> LossReport:
    return LossReport(total=terms.total.item(), task_term=terms.task.item(), reg_term=terms.reg.item(),
                      fp_used=graph.forward_count, bp_used=graph.backward_count)


def _noise_shape(encoder: EncoderParams, batch: Batch) -> Tuple[int, int, int]:
    return len(batch), batch.tokens.shape[1], encoder.config.dim


def standard_loss(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
                  rng: np.random.Generator | None = None, head_mode: str = "train") -> LossReport:
    graph = ComputeGraph()
    weights = head.effective_weights(graph, head_mode)
    terms = build_standard(graph, encoder, head, batch, cfg, weights)
    graph.backward(terms.total)
    return _report(graph, terms)


def r3f_loss(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
             rng: np.random.Generator, head_mode: str = "train", noise: np.ndarray | None = None) -> LossReport:
    """R3F step (R4F when the head is spectrally normalized); fresh noise per example"""
    _check_head(head, cfg)
    if cfg.lam == 0.0:
        # the regularizer vanishes, so skip the noisy pass entirely
        return standard_loss(encoder, head, batch, cfg, rng, head_mode)
    if noise is None:
        noise = sample_noise(_noise_shape(encoder, batch), cfg, rng)
    graph = ComputeGraph()
    weights = head.effective_weights(graph, head_mode)
    try:
        terms = build_r3f(graph, encoder, head, batch, cfg, noise, weights)
    except NumericError as e:
        raise NumericError(f"{cfg.method}: {e} (batch {len(batch)}, lambda {cfg.lam}, "
                           f"noise max {np.abs(noise).max():.3e})") from e
    graph.backward(terms.total)
    return _report(graph, terms)


def smart_inner_ascent(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
                       rng: np.random.Generator, head_mode: str = "train",
                       graph: ComputeGraph | None = None, weights: List[Tensor] | None = None) -> np.ndarray:
    """Approximates the sup over the eps ball of KL_S(g.f(x), g.f(x + delta)).

    Starts from projected noise and takes S normalized-gradient ascent steps, each
    followed by projection. Every step records one forward and one backward pass.
    """
    graph = graph or ComputeGraph()
    if weights is None:
        weights = head.effective_weights(graph, head_mode)
    delta = project(sample_noise(_noise_shape(encoder, batch), cfg, rng), cfg)
    clean = _forward_logits(graph, encoder, head, batch.tokens, weights).values
    for _ in range(cfg.ascent_steps):
        delta = _ascent_step(graph, encoder, head, batch, cfg, weights, Tensor(clean), delta)
    return delta


def _ascent_step(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, batch: Batch,
                 cfg: RegularizerConfig, weights: List[Tensor], clean_logits: Tensor,
                 delta: np.ndarray) -> np.ndarray:
    leaf = Tensor(delta, requires_grad=True)
    perturbed = _forward_logits(graph, encoder, head, batch.tokens, weights, leaf)
    graph.backward(graph_symmetric_kl(graph, clean_logits, perturbed), wrt=[leaf])
    return project(delta + cfg.ascent_lr * _normalized(leaf.grad), cfg)


def _stacked_first_pass(graph: ComputeGraph, encoder: EncoderParams, head: HeadParams, batch: Batch,
                        weights: List[Tensor], delta: Tensor) -> Tuple[Tensor, Tensor]:
    """One forward over [x; x + delta0] returning (clean logits, perturbed logits)"""
    size = len(batch)
    tokens = np.concatenate([batch.tokens, batch.tokens], axis=0)
    with graph.forward_pass():
        perturbation = graph.concat([Tensor(np.zeros(delta.shape)), delta], axis=0)
        logits = head_logits(head, encode_batch(encoder, tokens, graph, perturbation), graph, weights=weights)
        halves = graph.reshape(logits, (2, size, logits.shape[-1]))
        return graph.take(halves, axis=0, index=0), graph.take(halves, axis=0, index=1)


def smart_loss(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
               rng: np.random.Generator, head_mode: str = "train") -> LossReport:
    """task + lambda * KL_S at the ascent result, delta* held constant.

    The clean pass and the first ascent pass run as one stacked forward, so a step
    records 1+S forwards and 1+S backwards.
    """
    _check_head(head, cfg)
    graph = ComputeGraph()
    weights = head.effective_weights(graph, head_mode)
    delta = project(sample_noise(_noise_shape(encoder, batch), cfg, rng), cfg)
    leaf = Tensor(delta, requires_grad=True)
    clean, perturbed = _stacked_first_pass(graph, encoder, head, batch, weights, leaf)
    clean_const = clean.detach()
    graph.backward(graph_symmetric_kl(graph, clean_const, perturbed), wrt=[leaf])
    delta = project(delta + cfg.ascent_lr * _normalized(leaf.grad), cfg)
    for _ in range(cfg.ascent_steps - 1):
        delta = _ascent_step(graph, encoder, head, batch, cfg, weights, clean_const, delta)
    adversarial = _forward_logits(graph, encoder, head, batch.tokens, weights, Tensor(delta))
    task = graph_cross_entropy(graph, clean, batch.labels, cfg.label_smoothing)
    terms = _combine(graph, task, graph_symmetric_kl(graph, clean, adversarial), cfg.lam)
    graph.backward(terms.total)
    return _report(graph, terms)


@dataclass
class FreeLBTrajectory:
    deltas: List[np.ndarray]
    losses: List[float]
    report: LossReport


def freelb_trajectory(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
                      rng: np.random.Generator, head_mode: str = "train") -> FreeLBTrajectory:
    """Runs the S+1 FreeLB iterates, accumulating averaged parameter gradients"""
    _check_head(head, cfg)
    graph = ComputeGraph()
    weights = head.effective_weights(graph, head_mode)
    delta = project(sample_noise(_noise_shape(encoder, batch), cfg, rng), cfg)
    iterates = cfg.ascent_steps + 1
    deltas, losses = [], []
    for t in range(iterates):
        leaf = Tensor(delta, requires_grad=True)
        logits = _forward_logits(graph, encoder, head, batch.tokens, weights, leaf)
        loss = graph_cross_entropy(graph, logits, batch.labels, cfg.label_smoothing)
        graph.backward(graph.scale(loss, 1.0 / iterates))
        deltas.append(delta)
        losses.append(loss.item())
        if t < iterates - 1:
            delta = project(delta + cfg.ascent_lr * _normalized(leaf.grad), cfg)
    total = float(np.mean(losses))
    report = LossReport(total, total, 0.0, graph.forward_count, graph.backward_count)
    return FreeLBTrajectory(deltas, losses, report)


def freelb_loss(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
                rng: np.random.Generator, head_mode: str = "train") -> LossReport:
    return freelb_trajectory(encoder, head, batch, cfg, rng, head_mode).report


OBJECTIVES: Dict[str, Callable[..., LossReport]] = {
    "standard": standard_loss,
    "standard_pp": standard_loss,
    "r3f": r3f_loss,
    "r4f": r3f_loss,
    "smart": smart_loss,
    "freelb": freelb_loss,
}


def step_loss(encoder: EncoderParams, head: HeadParams, batch: Batch, cfg: RegularizerConfig,
              rng: np.random.Generator) -> LossReport:
    return OBJECTIVES[cfg.method](encoder, head, batch, cfg, rng)
