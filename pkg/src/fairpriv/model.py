"""Small decoder-only transformer language model with low-rank adapters.

The base network (embeddings, attention, MLP, layer norms, output head) is
frozen after seeded initialization; rank-r adapter factors on the attention
query and value projections are the only trainable parameters. The adapted
projection computes W0 x + B A x with B zero-initialized, so an untrained
adapter leaves the base model's outputs unchanged.

Everything runs in double precision on CPU; dropout draws from an explicit
generator so training is reproducible from a seed.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import PAD_ID, TokenSequence, Vocabulary

DTYPE = torch.float64


class ModelError(ValueError):
    pass


class SequenceTooLongError(ModelError):
    pass


class NoScorableTokensError(ModelError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    context: int = 64
    dropout: float = 0.1
    lora_rank: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 1 <= self.lora_rank <= self.dim:
            raise ModelError(f"lora_rank must be in [1, {self.dim}], got {self.lora_rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be at least 2")


def _dropout(x: torch.Tensor, p: float, train_mode: bool, rng) -> torch.Tensor:
    if not train_mode or p <= 0.0:
        return x
    if rng is None:
        raise ModelError("training-mode dropout requires an explicit generator")
    keep = 1.0 - p
    mask = (torch.rand(x.shape, generator=rng, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep


class LoRALinear(nn.Module):
    """Linear layer with a frozen base weight and trainable low-rank factors."""

    def __init__(self, dim_in: int, dim_out: int, rank: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(dim_out, dim_in))
        self.bias = nn.Parameter(torch.empty(dim_out))
        self.lora_a = nn.Parameter(torch.empty(rank, dim_in))
        self.lora_b = nn.Parameter(torch.empty(dim_out, rank))

    def forward(self, x: torch.Tensor, use_adapter: bool = True,
                capture: list | None = None) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if use_adapter:
            u = x @ self.lora_a.T
            v = u @ self.lora_b.T
            if capture is not None:
                capture.append((x, u, v))
            y = y + v
        return y


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.dim // cfg.heads
        self.dropout = cfg.dropout
        self.q_proj = LoRALinear(cfg.dim, cfg.dim, cfg.lora_rank)
        self.k_proj = nn.Linear(cfg.dim, cfg.dim)
        self.v_proj = LoRALinear(cfg.dim, cfg.dim, cfg.lora_rank)
        self.o_proj = nn.Linear(cfg.dim, cfg.dim)

    def forward(self, x, train_mode, rng, use_adapters, capture=None):
        b, t, c = x.shape
        q = self.q_proj(x, use_adapters, capture)
        k = self.k_proj(x)
        v = self.v_proj(x, use_adapters, capture)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        att = _dropout(att, self.dropout, train_mode, rng)
        y = (att @ v).transpose(1, 2).contiguous().view(b, t, c)
        y = self.o_proj(y)
        return _dropout(y, self.dropout, train_mode, rng)


class Mlp(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.dim, 4 * cfg.dim)
        self.proj = nn.Linear(4 * cfg.dim, cfg.dim)
        self.dropout = cfg.dropout

    def forward(self, x, train_mode, rng):
        x = self.proj(F.gelu(self.fc(x)))
        return _dropout(x, self.dropout, train_mode, rng)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = Mlp(cfg)

    def forward(self, x, train_mode, rng, use_adapters, capture=None):
        x = x + self.attn(self.ln1(x), train_mode, rng, use_adapters, capture)
        x = x + self.mlp(self.ln2(x), train_mode, rng)
        return x


class TinyLM(nn.Module):
    """Decoder-only transformer; only the adapter factors are trainable."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.wte = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.wpe = nn.Embedding(cfg.context, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self.to(DTYPE)
        self._init_weights(cfg.seed)
        for name, p in self.named_parameters():
            p.requires_grad = name.endswith(("lora_a", "lora_b"))

    def _init_weights(self, seed: int):
        g = torch.Generator().manual_seed(seed)

        def normal_(tensor, std=0.02):
            with torch.no_grad():
                tensor.copy_(torch.randn(tensor.shape, generator=g, dtype=DTYPE) * std)

        for module in self.modules():
            if isinstance(module, nn.LayerNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                normal_(module.weight)
            elif isinstance(module, LoRALinear):
                normal_(module.weight)
                normal_(module.lora_a)
                with torch.no_grad():
                    module.bias.zero_()
                    module.lora_b.zero_()
            elif isinstance(module, nn.Linear):
                normal_(module.weight)
                if module.bias is not None:
                    with torch.no_grad():
                        module.bias.zero_()

    def forward(self, ids: torch.Tensor, train_mode: bool = False, rng=None,
                use_adapters: bool = True, capture: list | None = None):
        """Returns (logits, hidden) of shape (B, T, vocab) and (B, T, dim).

        capture, when a list, collects each adapter's (input, low-rank
        activation, adapter output) for per-example gradient extraction.
        """
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        b, t = ids.shape
        if t > self.cfg.context:
            raise SequenceTooLongError(
                f"sequence length {t} exceeds context {self.cfg.context}"
            )
        pos = torch.arange(t)
        x = self.wte(ids) + self.wpe(pos)
        x = _dropout(x, self.cfg.dropout, train_mode, rng)
        for block in self.blocks:
            x = block(x, train_mode, rng, use_adapters, capture)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        return logits, hidden


def trainable_parameters(model: TinyLM) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def trainable_parameter_count(model: TinyLM) -> int:
    return sum(p.numel() for p in trainable_parameters(model))


@dataclass(frozen=True)
class GradientVector:
    """Flat gradient over the trainable parameters, l2 norm cached."""

    values: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "_norm", float(torch.linalg.vector_norm(self.values)))

    @property
    def norm(self) -> float:
        return self._norm

    def scaled(self, factor: float) -> "GradientVector":
        return GradientVector(values=self.values * factor)


@dataclass(frozen=True)
class SequenceScore:
    """Total log-likelihood (nats) over non-pad next-token targets."""

    total_log_likelihood: float
    token_count: int

    @property
    def mean_log_likelihood(self) -> float:
        if self.token_count == 0:
            return 0.0
        return self.total_log_likelihood / self.token_count


def seqs_to_tensor(seqs: list[TokenSequence]) -> torch.Tensor:
    """Stack sequences into a (B, T) id tensor, right-padding to the longest."""
    if not seqs:
        raise ModelError("empty sequence batch")
    longest = max(s.length for s in seqs)
    out = torch.full((len(seqs), longest), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : s.length] = torch.tensor(s.ids, dtype=torch.long)
    return out


def _target_log_likelihoods(model: TinyLM, ids: torch.Tensor):
    """Per-sequence (totals, counts) of next-token log-likelihood, pads excluded."""
    logits, _ = model(ids)
    logprobs = F.log_softmax(logits[:, :-1], dim=-1)
    targets = ids[:, 1:]
    mask = targets != PAD_ID
    token_ll = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    totals = (token_ll * mask).sum(dim=1)
    counts = mask.sum(dim=1)
    return totals, counts


def sequence_scores(model: TinyLM, seqs: list[TokenSequence],
                    batch_size: int = 128) -> list[SequenceScore]:
    """Score a list of sequences; raises on all-pad input sequences."""
    out: list[SequenceScore] = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            batch = seqs[start : start + batch_size]
            for s in batch:
                if s.non_pad_count() == 0:
                    raise NoScorableTokensError("cannot score an all-pad sequence")
            totals, counts = _target_log_likelihoods(model, seqs_to_tensor(batch))
            for t, c in zip(totals.tolist(), counts.tolist()):
                out.append(SequenceScore(total_log_likelihood=t, token_count=int(c)))
    return out


def sequence_score(model: TinyLM, seq: TokenSequence) -> SequenceScore:
    return sequence_scores(model, [seq])[0]


def sequence_loss(model: TinyLM, seq: TokenSequence) -> float:
    """Mean cross-entropy over the sequence's non-pad targets."""
    score = sequence_score(model, seq)
    if score.token_count == 0:
        raise NoScorableTokensError("sequence has no non-pad targets")
    return -score.mean_log_likelihood


def batch_mean_loss(model: TinyLM, ids: torch.Tensor, train_mode: bool = False,
                    rng=None) -> torch.Tensor:
    """Differentiable mean over examples of per-example mean cross-entropy."""
    logits, _ = model(ids, train_mode=train_mode, rng=rng)
    logprobs = F.log_softmax(logits[:, :-1], dim=-1)
    targets = ids[:, 1:]
    mask = targets != PAD_ID
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise NoScorableTokensError("a sequence in the batch has no non-pad targets")
    token_ll = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    per_example = -(token_ll * mask).sum(dim=1) / counts
    return per_example.mean()


def per_example_gradient(model: TinyLM, seq: TokenSequence, train_mode: bool = False,
                         rng=None) -> GradientVector:
    """Flat gradient of the per-sequence mean loss over trainable parameters."""
    params = trainable_parameters(model)
    if not params:
        raise ModelError("model has no trainable parameters")
    model.zero_grad(set_to_none=True)
    loss = batch_mean_loss(model, seqs_to_tensor([seq]), train_mode=train_mode, rng=rng)
    loss.backward()
    flat = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in params
    ]).detach().clone()
    model.zero_grad(set_to_none=True)
    return GradientVector(values=flat)


def per_example_flat_gradients(model: TinyLM, ids: torch.Tensor,
                               train_mode: bool = False, rng=None):
    """Per-example gradient matrix (B, P) over the trainable parameters plus
    per-example losses, from a single batched forward/backward.

    Works because the trainable parameters are exactly the adapter factors:
    with u = x A^T and v = u B^T captured per adapter, example b's gradients
    are dL_b/dA = sum_t grad_u[b,t]^T x[b,t] and dL_b/dB = sum_t
    grad_v[b,t]^T u[b,t]. Backpropagating the sum of per-example losses keeps
    the (B, T, .) gradients per-example row-wise. Matches the one-sequence
    per_example_gradient up to floating-point reduction order.
    """
    capture: list = []
    logits, _ = model(ids, train_mode=train_mode, rng=rng, capture=capture)
    logprobs = F.log_softmax(logits[:, :-1], dim=-1)
    targets = ids[:, 1:]
    mask = targets != PAD_ID
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise NoScorableTokensError("a sequence in the batch has no non-pad targets")
    token_ll = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    losses = -(token_ll * mask).sum(dim=1) / counts

    grad_targets = [t for (_, u, v) in capture for t in (u, v)]
    upstream = torch.autograd.grad(losses.sum(), grad_targets)
    pieces = []
    for i, (x, u, _) in enumerate(capture):
        grad_u, grad_v = upstream[2 * i], upstream[2 * i + 1]
        grad_a = torch.einsum("btr,bti->bri", grad_u, x)
        grad_b = torch.einsum("bto,btr->bor", grad_v, u)
        pieces.append(grad_a.reshape(ids.shape[0], -1))
        pieces.append(grad_b.reshape(ids.shape[0], -1))
    return torch.cat(pieces, dim=1), losses.detach()


def apply_flat_update(model: TinyLM, delta: torch.Tensor) -> None:
    """Add a flat delta vector to the trainable parameters, in order."""
    offset = 0
    with torch.no_grad():
        for p in trainable_parameters(model):
            n = p.numel()
            p.add_(delta[offset : offset + n].view(p.shape))
            offset += n
    if offset != delta.numel():
        raise ModelError("flat update size does not match trainable parameters")


def conditional_scores(model: TinyLM, pairs: list[tuple[list[int], list[int]]],
                       batch_size: int = 128) -> list[SequenceScore]:
    """Score continuation tokens given a prefix; prefix tokens are unscored.

    Each pair is (prefix ids, continuation ids); the prefix must hold at
    least one token so every continuation token has a conditioning context.
    """
    out: list[SequenceScore] = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = pairs[start : start + batch_size]
            rows, spans = [], []
            for prefix, continuation in batch:
                if not prefix:
                    raise ModelError("conditional scoring requires a non-empty prefix")
                rows.append(list(prefix) + list(continuation))
                spans.append((len(prefix), len(prefix) + len(continuation)))
            longest = max(len(r) for r in rows)
            ids = torch.full((len(rows), longest), PAD_ID, dtype=torch.long)
            for i, r in enumerate(rows):
                ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
            logits, _ = model(ids)
            logprobs = F.log_softmax(logits[:, :-1], dim=-1)
            token_ll = logprobs.gather(-1, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
            for i, (lo, hi) in enumerate(spans):
                count = hi - lo
                total = float(token_ll[i, lo - 1 : hi - 1].sum()) if count else 0.0
                out.append(SequenceScore(total_log_likelihood=total, token_count=count))
    return out


def sentence_embeddings(model: TinyLM, seqs: list[TokenSequence],
                        batch_size: int = 128) -> torch.Tensor:
    """Mean of final-layer hidden states over non-pad positions, per sequence."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            batch = seqs[start : start + batch_size]
            ids = seqs_to_tensor(batch)
            mask = (ids != PAD_ID).to(DTYPE)
            if (mask.sum(dim=1) == 0).any():
                raise NoScorableTokensError("cannot embed an all-pad sequence")
            _, hidden = model(ids)
            pooled = (hidden * mask.unsqueeze(-1)).sum(dim=1) / mask.sum(dim=1, keepdim=True)
            chunks.append(pooled)
    return torch.cat(chunks, dim=0)


def sentence_embedding(model: TinyLM, seq: TokenSequence) -> torch.Tensor:
    return sentence_embeddings(model, [seq])[0]


@dataclass(frozen=True)
class LMSnapshot:
    """Immutable trained-model state bound to a vocabulary.

    All evaluation (likelihood scoring, embeddings, attacks, perplexity) runs
    against a snapshot; training mutates a separate TinyLM and snapshots it.
    """

    config: ModelConfig
    vocab: Vocabulary
    provenance: dict = field(default_factory=dict)
    model: TinyLM = None

    @classmethod
    def from_model(cls, model: TinyLM, vocab: Vocabulary, provenance: dict | None = None):
        frozen = copy.deepcopy(model)
        for p in frozen.parameters():
            p.grad = None
        return cls(config=model.cfg, vocab=vocab, provenance=dict(provenance or {}),
                   model=frozen)

    def vocab_hash(self) -> str:
        return self.vocab.content_hash()

    def logits(self, seq: TokenSequence, train_mode: bool = False, rng=None):
        logits, hidden = self.model(seqs_to_tensor([seq]), train_mode=train_mode, rng=rng)
        return logits[0], hidden[0]

    def sequence_score(self, seq: TokenSequence) -> SequenceScore:
        return sequence_score(self.model, seq)

    def sequence_scores(self, seqs: list[TokenSequence]) -> list[SequenceScore]:
        return sequence_scores(self.model, seqs)

    def loss(self, seq: TokenSequence) -> float:
        return sequence_loss(self.model, seq)

    def embedding(self, seq: TokenSequence) -> torch.Tensor:
        return sentence_embedding(self.model, seq)

    def embeddings(self, seqs: list[TokenSequence]) -> torch.Tensor:
        return sentence_embeddings(self.model, seqs)

    def per_example_gradient(self, seq: TokenSequence) -> GradientVector:
        return per_example_gradient(self.model, seq)

    def conditional_scores(self, pairs: list[tuple[list[int], list[int]]]) -> list[SequenceScore]:
        return conditional_scores(self.model, pairs)


CHECKPOINT_VERSION = 1


def save_checkpoint(snapshot: LMSnapshot, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(snapshot.config),
        "state": snapshot.model.state_dict(),
        "vocab_hash": snapshot.vocab_hash(),
        "provenance": dict(snapshot.provenance),
    }
    torch.save(payload, path)


def load_checkpoint(path, vocab: Vocabulary) -> LMSnapshot:
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')}")
    if payload["vocab_hash"] != vocab.content_hash():
        raise CheckpointError("vocabulary hash mismatch: checkpoint was made for a "
                              "different vocabulary")
    cfg = ModelConfig(**payload["config"])
    model = TinyLM(cfg)
    model.load_state_dict(payload["state"])
    return LMSnapshot(config=cfg, vocab=vocab, provenance=dict(payload["provenance"]),
                      model=model)
