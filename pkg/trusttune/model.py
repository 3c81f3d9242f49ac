"""Tiny token encoder f, classification head g, and masked-token pretraining.

The encoder embeds m token ids, adds sinusoidal positions, runs B post-norm
transformer blocks (single-head attention, tanh feed-forward) and pools to one
vector of size n. Perturbations (R3F noise, adversarial deltas) enter right after
the embedding lookup, before the first block.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ComputeGraph, Tensor
from .errors import ConfigError, NumericError, ShapeError
from .optim import Adam, Schedule
from .tasks import MASK_ID
from .utils import RngStreams, stable_seed

logger = logging.getLogger(__name__)

BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    dim: int = 16
    blocks: int = 2
    ffn_dim: int = 32
    max_len: int = 16
    pooling: str = "first_token"
    ln_eps: float = 1e-5
    init_std: float = 0.1
    positions: bool = True

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.pooling not in ("first_token", "mean"):
            raise ConfigError(f"pooling must be first_token or mean, got {self.pooling}")

    @classmethod
    def from_section(cls, model: Dict[str, Any]) -> "EncoderConfig":
        return cls(vocab_size=model["vocab_size"], dim=model["dim"], blocks=model["blocks"],
                   ffn_dim=model["ffn_dim"], max_len=model["max_len"], pooling=model["pooling"],
                   ln_eps=model["ln_eps"], init_std=model["init_std"])

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class EncoderParams:
    config: EncoderConfig
    embedding_table: Tensor
    blocks: List[BlockParams]

    @property
    def pooling(self) -> str:
        return self.config.pooling

    def named_tensors(self) -> Dict[str, Tensor]:
        named = {"embedding_table": self.embedding_table}
        for i, block in enumerate(self.blocks):
            for name in BLOCK_FIELDS:
                named[f"blocks.{i}.{name}"] = getattr(block, name)
        return named

    def copy(self) -> "EncoderParams":
        blocks = [BlockParams(**{n: Tensor(getattr(b, n).values, requires_grad=True, name=getattr(b, n).name)
                                 for n in BLOCK_FIELDS}) for b in self.blocks]
        return EncoderParams(self.config, Tensor(self.embedding_table.values, requires_grad=True,
                                                 name="embedding_table"), blocks)

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    def set_trainable(self, trainable: bool) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = trainable

    def fingerprint(self) -> str:
        return tensors_fingerprint(self.named_tensors())


def tensors_fingerprint(named: Dict[str, Tensor]) -> str:
    """sha256 over names, shapes and raw fp64 bytes"""
    digest = hashlib.sha256()
    for name in sorted(named):
        values = np.ascontiguousarray(named[name].values, dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(repr(values.shape).encode("utf-8"))
        digest.update(values.tobytes())
    return digest.hexdigest()


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    n, h, std = config.dim, config.ffn_dim, config.init_std

    def matrix(rows: int, cols: int, name: str) -> Tensor:
        return Tensor(rng.normal(0.0, std, size=(rows, cols)), requires_grad=True, name=name)

    def const(value: float, size: int, name: str) -> Tensor:
        return Tensor(np.full(size, value), requires_grad=True, name=name)

    table = matrix(config.vocab_size, n, "embedding_table")
    blocks = []
    for i in range(config.blocks):
        p = f"blocks.{i}."
        blocks.append(BlockParams(
            wq=matrix(n, n, p + "wq"), wk=matrix(n, n, p + "wk"), wv=matrix(n, n, p + "wv"),
            wo=matrix(n, n, p + "wo"), w1=matrix(n, h, p + "w1"), b1=const(0.0, h, p + "b1"),
            w2=matrix(h, n, p + "w2"), b2=const(0.0, n, p + "b2"),
            ln1_gain=const(1.0, n, p + "ln1_gain"), ln1_bias=const(0.0, n, p + "ln1_bias"),
            ln2_gain=const(1.0, n, p + "ln2_gain"), ln2_bias=const(0.0, n, p + "ln2_bias"),
        ))
    return EncoderParams(config, table, blocks)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * rates[None, :]
    return np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))


def _check_tokens(params: EncoderParams, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"token matrix must be 2-D (batch, length), got shape {tokens.shape}")
    if tokens.shape[1] == 0:
        raise ValueError("cannot encode an empty sequence")
    if tokens.shape[1] > params.config.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {params.config.max_len}")
    if tokens.min() < 0 or tokens.max() >= params.config.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {params.config.vocab_size}")
    return tokens


def _block_forward(graph: ComputeGraph, x: Tensor, block: BlockParams, eps: float) -> Tensor:
    width = x.shape[-1]
    q = graph.matmul(x, block.wq)
    k = graph.matmul(x, block.wk)
    v = graph.matmul(x, block.wv)
    scores = graph.scale(graph.matmul(q, graph.transpose(k)), 1.0 / math.sqrt(width))
    context = graph.matmul(graph.softmax(scores), v)
    h = graph.layer_norm(graph.add(x, graph.matmul(context, block.wo)), block.ln1_gain, block.ln1_bias, eps)
    hidden = graph.tanh(graph.add(graph.matmul(h, block.w1), block.b1))
    ff = graph.add(graph.matmul(hidden, block.w2), block.b2)
    return graph.layer_norm(graph.add(h, ff), block.ln2_gain, block.ln2_bias, eps)


def encode_states(params: EncoderParams, tokens: np.ndarray, graph: ComputeGraph,
                  perturbation: Tensor | None = None) -> Tensor:
    """Per-token hidden states (batch, m, n)"""
    tokens = _check_tokens(params, tokens)
    batch, length = tokens.shape
    x = graph.embedding(params.embedding_table, tokens)
    if params.config.positions:
        positions = np.broadcast_to(sinusoidal_positions(length, params.config.dim), x.shape)
        x = graph.add(x, Tensor(positions))
    if perturbation is not None:
        if perturbation.shape != x.shape:
            raise ShapeError(f"perturbation shape {perturbation.shape} does not match embedded input {x.shape}")
        x = graph.add(x, perturbation)
    for block in params.blocks:
        x = _block_forward(graph, x, block, params.config.ln_eps)
    return x


def pool(graph: ComputeGraph, states: Tensor, pooling: str) -> Tensor:
    if pooling == "first_token":
        return graph.take(states, axis=1, index=0)
    return graph.mean(states, axis=1)


def encode_batch(params: EncoderParams, tokens: np.ndarray, graph: ComputeGraph,
                 perturbation: Tensor | None = None) -> Tensor:
    """Representations (batch, n) for a token matrix"""
    return pool(graph, encode_states(params, tokens, graph, perturbation), params.pooling)


def encode(params: EncoderParams, tokens: Sequence[int], graph: ComputeGraph | None = None) -> Tensor:
    """Representation vector (n,) of one token sequence"""
    graph = graph or ComputeGraph()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ShapeError(f"encode expects a 1-D id sequence, got shape {tokens.shape}")
    reps = encode_batch(params, tokens[None, :], graph)
    return graph.reshape(reps, (params.config.dim,))


def embed_then_encode(params: EncoderParams, tokens: Sequence[int], perturbation: Tensor | np.ndarray,
                      graph: ComputeGraph | None = None) -> Tensor:
    """encode() with a (m, n) perturbation added to the embedded input"""
    graph = graph or ComputeGraph()
    tokens = np.asarray(tokens, dtype=np.int64)
    if not isinstance(perturbation, Tensor):
        perturbation = Tensor(perturbation)
    if perturbation.shape != (len(tokens), params.config.dim):
        raise ShapeError(f"perturbation must have shape {(len(tokens), params.config.dim)}, got {perturbation.shape}")
    batched = graph.reshape(perturbation, (1,) + perturbation.shape)
    reps = encode_batch(params, tokens[None, :], graph, batched)
    return graph.reshape(reps, (params.config.dim,))


def encode_values(params: EncoderParams, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Plain fp64 representations without keeping a graph around"""
    tokens = np.asarray(tokens, dtype=np.int64)
    chunks = [encode_batch(params, tokens[i:i + batch_size], ComputeGraph()).values
              for i in range(0, len(tokens), batch_size)]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# classification head
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    num_classes: int
    layers: int = 2
    hidden: int = 16
    spectral: bool = False
    train_iters: int = 1
    eval_iters: int = 25
    init_std: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"head needs at least one layer, got {self.layers}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")


SpectralState = Tuple[np.ndarray, np.ndarray]


@dataclass
class HeadParams:
    config: HeadConfig
    weights: List[Tensor]
    biases: List[Tensor]
    spectral_state: List[Optional[SpectralState]] = field(default_factory=list)

    @property
    def spectral_enabled(self) -> bool:
        return self.config.spectral

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def named_tensors(self) -> Dict[str, Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"head.{i}.weight"] = w
            named[f"head.{i}.bias"] = b
        return named

    def copy(self) -> "HeadParams":
        state = [None if s is None else (s[0].copy(), s[1].copy()) for s in self.spectral_state]
        return HeadParams(self.config,
                          [Tensor(w.values, requires_grad=True, name=w.name) for w in self.weights],
                          [Tensor(b.values, requires_grad=True, name=b.name) for b in self.biases],
                          state)

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    def effective_weights(self, graph: ComputeGraph, mode: str = "train") -> List[Tensor]:
        """Weights used by the forward pass; W / sigma_hat(W) when spectral normalization is on.

        mode "train" runs ``train_iters`` power iterations and persists the state,
        "eval" runs ``eval_iters`` on a copy, "frozen" uses the stored state as is.
        """
        if not self.spectral_enabled:
            return list(self.weights)
        if mode not in ("train", "eval", "frozen"):
            raise ValueError(f"unknown head mode {mode}")
        effective = []
        for i, w in enumerate(self.weights):
            state = self.spectral_state[i]
            if mode == "frozen" and state is not None:
                u, v = state
            else:
                iters = self.config.train_iters if mode == "train" else self.config.eval_iters
                _, (u, v), _ = spectral_normalize(w.values, state, iters)
                if mode == "train":
                    self.spectral_state[i] = (u, v)
            sigma = graph.sum(graph.multiply(w, Tensor(np.outer(u, v))))
            effective.append(graph.divide(w, sigma))
        return effective


def init_head(config: HeadConfig, rng: np.random.Generator) -> HeadParams:
    dims = [config.input_dim] + [config.hidden] * (config.layers - 1) + [config.num_classes]
    weights, biases = [], []
    for i in range(config.layers):
        weights.append(Tensor(rng.normal(0.0, config.init_std, size=(dims[i], dims[i + 1])),
                              requires_grad=True, name=f"head.{i}.weight"))
        biases.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True, name=f"head.{i}.bias"))
    return HeadParams(config, weights, biases, [None] * config.layers)


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise NumericError("power iteration collapsed to the zero vector")
    return x / norm


def spectral_normalize(W: np.ndarray, state: Optional[SpectralState], iters: int) -> Tuple[np.ndarray, SpectralState, float]:
    """Power-iteration estimate sigma_hat of the largest singular value and W / sigma_hat.

    u lives in the row space of W, v in the column space; a missing state starts
    from a fixed seeded random unit u.
    """
    W = np.asarray(W, dtype=np.float64)
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if not np.any(W):
        raise NumericError("spectral_normalize: sigma is undefined for a zero matrix")
    if state is None:
        u = _unit(np.random.default_rng(stable_seed("spectral", W.shape)).normal(size=W.shape[0]))
    else:
        u = state[0]
    v = state[1] if state is not None else np.zeros(W.shape[1])
    for _ in range(iters):
        v = _unit(W.T @ u)
        u = _unit(W @ v)
    sigma = float(u @ W @ v)
    return W / sigma, (u, v), sigma


def head_logits(head: HeadParams, representation: Tensor, graph: ComputeGraph,
                weights: List[Tensor] | None = None, mode: str = "eval") -> Tensor:
    """Pre-softmax outputs (batch, q)"""
    if not np.all(np.isfinite(representation.values)):
        raise NumericError("head input contains non-finite values")
    if weights is None:
        weights = head.effective_weights(graph, mode)
    x = representation
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, head.biases)):
        x = graph.add(graph.matmul(x, w), b)
        if i < last:
            x = graph.tanh(x)
    return x


def head_forward(head: HeadParams, representation: Tensor | np.ndarray, graph: ComputeGraph | None = None,
                 mode: str = "eval") -> Tensor:
    """Class probabilities; accepts one representation (n,) or a batch (batch, n)"""
    graph = graph or ComputeGraph()
    if not isinstance(representation, Tensor):
        representation = Tensor(representation)
    single = representation.values.ndim == 1
    if single:
        representation = graph.reshape(representation, (1, representation.shape[0]))
    probs = graph.softmax(head_logits(head, representation, graph, mode=mode))
    if single:
        probs = graph.reshape(probs, (head.num_classes,))
    return probs


def predict(encoder: EncoderParams, head: HeadParams, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Arg-max class per row, evaluated with spectral eval iterations on a state copy"""
    preds = []
    for i in range(0, len(tokens), batch_size):
        graph = ComputeGraph()
        reps = encode_batch(encoder, tokens[i:i + batch_size], graph)
        preds.append(np.argmax(head_logits(head, reps, graph, mode="eval").values, axis=-1))
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# masked-token pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    mask_rate: float = 0.15
    steps: int = 800
    corpus_size: int = 4000
    batch_size: int = 32
    lr: float = 3e-3

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.steps < 0 or self.corpus_size < 1 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0; corpus_size and batch_size must be positive")

    @classmethod
    def from_section(cls, section: Dict[str, Any]) -> "PretrainConfig":
        return cls(mask_rate=section["mask_rate"], steps=section["steps"], corpus_size=section["corpus_size"],
                   batch_size=section["batch_size"], lr=section["lr"])


@dataclass
class PretrainResult:
    params: EncoderParams
    losses: List[float]


def sample_mask(tokens: np.ndarray, mask_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask over positions 1..m-1 with at least one masked position per row"""
    mask = rng.random(tokens.shape) < mask_rate
    mask[:, 0] = False
    empty = ~mask.any(axis=1)
    if tokens.shape[1] > 1 and empty.any():
        fallback = rng.integers(1, tokens.shape[1], size=int(empty.sum()))
        mask[np.flatnonzero(empty), fallback] = True
    return mask


def masked_token_loss(params: EncoderParams, tokens: np.ndarray, mask: np.ndarray,
                      graph: ComputeGraph) -> Tuple[Tensor, Tensor]:
    """Mean negative log-likelihood of the original ids at masked positions (tied softmax)"""
    inputs = np.where(mask, MASK_ID, tokens)
    states = encode_states(params, inputs, graph)
    logits = graph.matmul(states, graph.transpose(params.embedding_table))
    logp = graph.log_softmax(logits)
    targets = np.zeros(logits.shape)
    rows, cols = np.nonzero(mask)
    targets[rows, cols, tokens[rows, cols]] = 1.0 / len(rows)
    loss = graph.scale(graph.sum(graph.multiply(logp, Tensor(targets))), -1.0)
    return loss, logits


def masked_token_accuracy(params: EncoderParams, corpus: np.ndarray, mask_rate: float, seed: int) -> float:
    rng = np.random.default_rng(stable_seed(seed, "masked-eval"))
    mask = sample_mask(corpus, mask_rate, rng)
    _, logits = masked_token_loss(params, corpus, mask, ComputeGraph())
    predicted = np.argmax(logits.values, axis=-1)
    return float(np.mean(predicted[mask] == corpus[mask]))


def pretrain(params: EncoderParams, cfg: PretrainConfig, corpus: np.ndarray, seed: int) -> PretrainResult:
    """Masked-token pretraining on a copy of ``params``; deterministic given seed"""
    corpus = np.asarray(corpus, dtype=np.int64)
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    params = params.copy()
    losses: List[float] = []
    if cfg.steps == 0:
        return PretrainResult(params, losses)
    streams = RngStreams(seed, "pretrain")
    named = params.named_tensors()
    optimizer = Adam(named, Schedule.from_fraction(cfg.lr, cfg.steps), bias_correction=True)
    order = streams.data.permutation(len(corpus))
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = streams.data.permutation(len(corpus)), 0
        batch = corpus[order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        mask = sample_mask(batch, cfg.mask_rate, streams.data)
        graph = ComputeGraph()
        optimizer.zero_grad()
        with graph.forward_pass():
            loss, _ = masked_token_loss(params, batch, mask, graph)
        graph.backward(loss)
        optimizer.step()
        losses.append(loss.item())
        if step % 100 == 0:
            logger.info("pretrain step %d/%d loss %.4f", step, cfg.steps, loss.item())
    params.zero_grad()
    return PretrainResult(params, losses)
