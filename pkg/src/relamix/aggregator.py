"""Relational attention aggregator with relation dropout (TRAN-RD).

Two attention blocks share one structure: per head, tokens are projected to
full dimension, attended, and layer-normalized; the block output is
LN(input + sum of head outputs + FFN(input)). The first block additionally
drops a fraction of its attended tokens during training. Tuple outputs are
mean-pooled, averaged per scale, and averaged across scales into one
embedding per sequence.

There is no positional encoding: both blocks are permutation-equivariant
over their tokens.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import storage
from .relations import RelationPlan


def _layer_norm(x: torch.Tensor, gain: torch.Tensor, offset: torch.Tensor, eps: float):
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + offset


def retained_token_count(tokens: int, dropout_ratio: float) -> int:
    """How many tokens survive relation dropout; never less than one."""
    return max(1, tokens - math.floor(dropout_ratio * tokens))


class RelationAttentionBlock(nn.Module):
    """One attention block over a small token set.

    head_combine="sum" adds the full-dimension head outputs together;
    "concat" is the conventional variant with d/heads head dims and an output
    projection.
    """

    def __init__(
        self,
        dim: int,
        heads: int = 8,
        ffn_multiplier: int = 2,
        head_combine: str = "sum",
        eps: float = 1e-5,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if head_combine not in ("sum", "concat"):
            raise ValueError(f"unknown head_combine {head_combine!r}")
        if head_combine == "concat" and dim % heads != 0:
            raise ValueError("concat variant needs dim divisible by heads")
        self.dim = dim
        self.heads = heads
        self.head_combine = head_combine
        self.eps = eps
        # The scores are scaled by sqrt(d / heads) in both variants.
        self.scale_factor = dim / heads
        head_dim = dim if head_combine == "sum" else dim // heads
        ffn_width = ffn_multiplier * dim

        def init(*shape):
            fan_in = shape[-1]
            w = torch.empty(shape)
            w.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
            return nn.Parameter(w)

        self.w_query = init(heads, head_dim, dim)
        self.w_key = init(heads, head_dim, dim)
        self.w_value = init(heads, head_dim, dim)
        self.w_out = init(dim, dim) if head_combine == "concat" else None
        self.ffn_w1 = init(ffn_width, dim)
        self.ffn_b1 = nn.Parameter(torch.zeros(ffn_width))
        self.ffn_w2 = init(dim, ffn_width)
        self.ffn_b2 = nn.Parameter(torch.zeros(dim))
        self.ln_attn_gain = nn.Parameter(torch.ones(head_dim))
        self.ln_attn_offset = nn.Parameter(torch.zeros(head_dim))
        self.ln_out_gain = nn.Parameter(torch.ones(dim))
        self.ln_out_offset = nn.Parameter(torch.zeros(dim))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Per-head softmax attention matrices, shape (..., heads, n, n)."""
        q = torch.einsum("hod,...nd->...hno", self.w_query, x)
        k = torch.einsum("hod,...nd->...hno", self.w_key, x)
        scores = torch.einsum("...hno,...hmo->...hnm", q, k) / math.sqrt(self.scale_factor)
        return torch.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to attention block")
        weights = self.attention_weights(x)
        v = torch.einsum("hod,...nd->...hno", self.w_value, x)
        attended = torch.einsum("...hnm,...hmo->...hno", weights, v)
        attended = _layer_norm(attended, self.ln_attn_gain, self.ln_attn_offset, self.eps)
        if self.head_combine == "sum":
            combined = attended.sum(dim=-3)
        else:
            merged = attended.movedim(-3, -2).flatten(-2)
            combined = merged @ self.w_out.T
        hidden = torch.nn.functional.gelu(x @ self.ffn_w1.T + self.ffn_b1)
        ffn = hidden @ self.ffn_w2.T + self.ffn_b2
        return _layer_norm(x + combined + ffn, self.ln_out_gain, self.ln_out_offset, self.eps)


class TranRdAggregator(nn.Module):
    """Aggregates a (T, d) snippet sequence into one d-vector plus class logits."""

    def __init__(
        self,
        dim: int,
        class_count: int,
        heads: int = 8,
        dropout_ratio: float = 0.5,
        ffn_multiplier: int = 2,
        head_combine: str = "sum",
        disable_rd_mhsa: bool = False,
        disable_scale_mhsa: bool = False,
        disable_relation_dropout: bool = False,
        eps: float = 1e-5,
        init_seed: int = 0,
    ):
        super().__init__()
        if not 0.0 <= dropout_ratio < 1.0:
            raise ValueError(f"dropout_ratio must be in [0, 1), got {dropout_ratio}")
        self.dim = dim
        self.class_count = class_count
        self.heads = heads
        self.dropout_ratio = dropout_ratio
        self.disable_rd_mhsa = disable_rd_mhsa
        self.disable_scale_mhsa = disable_scale_mhsa
        self.disable_relation_dropout = disable_relation_dropout
        gen = torch.Generator().manual_seed(init_seed)
        self.relation_block = RelationAttentionBlock(
            dim, heads, ffn_multiplier, head_combine, eps, generator=gen
        )
        self.scale_block = RelationAttentionBlock(
            dim, heads, ffn_multiplier, head_combine, eps, generator=gen
        )
        self.classifier = nn.Linear(dim, class_count)
        nn.init.zeros_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)

    @property
    def hyperparams(self) -> dict:
        return {
            "dim": self.dim,
            "class_count": self.class_count,
            "heads": self.heads,
            "dropout_ratio": self.dropout_ratio,
            "ffn_multiplier": self.relation_block.ffn_b1.shape[0] // self.dim,
            "head_combine": self.relation_block.head_combine,
            "disable_rd_mhsa": self.disable_rd_mhsa,
            "disable_scale_mhsa": self.disable_scale_mhsa,
            "disable_relation_dropout": self.disable_relation_dropout,
            "eps": self.relation_block.eps,
        }

    def _dropout_tokens(
        self, x: torch.Tensor, train: bool, generator: torch.Generator | None
    ) -> torch.Tensor:
        """Keep a random ordered subset of tokens per row; identity in eval."""
        n = x.shape[-2]
        if not train or self.disable_relation_dropout:
            return x
        keep = retained_token_count(n, self.dropout_ratio)
        if keep == n:
            return x
        flat = x.reshape(-1, n, x.shape[-1])
        scores = torch.rand(flat.shape[0], n, generator=generator)
        idx = scores.argsort(dim=1)[:, :keep].sort(dim=1).values
        picked = flat.gather(1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        return picked.reshape(*x.shape[:-2], keep, x.shape[-1])

    def rd_mhsa(
        self,
        tuple_features: torch.Tensor,
        train: bool = False,
        generator: torch.Generator | None = None,
        seed: int | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Attend within one relation tuple, then drop tokens when training.

        Returns (attended, retained): the full attended token matrix and the
        surviving subset; they coincide in eval mode.
        """
        if train and tuple_features.shape[-2] < 2:
            raise ValueError("relation dropout needs at least 2 tokens in train mode")
        if seed is not None:
            generator = torch.Generator().manual_seed(seed)
        attended = (
            tuple_features if self.disable_rd_mhsa else self.relation_block(tuple_features)
        )
        retained = self._dropout_tokens(attended, train, generator)
        return attended, retained

    def scale_wise_mhsa(self, retained_features: torch.Tensor) -> torch.Tensor:
        """Second attention pass over the retained tokens; never drops."""
        if self.disable_scale_mhsa:
            return retained_features
        return self.scale_block(retained_features)

    def aggregate(
        self,
        features: torch.Tensor,
        plan: RelationPlan,
        train: bool = False,
        generator: torch.Generator | None = None,
        seed: int | None = None,
        return_intermediates: bool = False,
    ) -> torch.Tensor:
        """Embed (B, T, d) or (T, d) features into (B, d) or (d,).

        Per scale, every sampled tuple is attended, pruned, re-attended and
        mean-pooled; tuple aggregates are averaged within the scale, and the
        final embedding is the mean of the per-scale vectors.
        """
        single = features.dim() == 2
        x = features.unsqueeze(0) if single else features
        if x.shape[1] != plan.sequence_length:
            raise ValueError(
                f"plan expects length {plan.sequence_length}, got {x.shape[1]}"
            )
        if seed is not None:
            generator = torch.Generator().manual_seed(seed)
        batch = x.shape[0]
        per_scale = []
        for r in plan.scales:
            idx = torch.as_tensor(plan.tuples_per_scale[r], dtype=torch.long)
            gathered = x[:, idx]  # (B, m, r, d)
            m = gathered.shape[1]
            flat = gathered.reshape(batch * m, r, self.dim)
            _, retained = self.rd_mhsa(flat, train=train, generator=generator)
            tokens = self.scale_wise_mhsa(retained)
            tuple_aggregate = tokens.mean(dim=1).reshape(batch, m, self.dim)
            per_scale.append(tuple_aggregate.mean(dim=1))
        stacked = torch.stack(per_scale)  # (T - 1, B, d)
        embedding = stacked.mean(dim=0)
        if single:
            embedding = embedding.squeeze(0)
            stacked = stacked.squeeze(1)
        if return_intermediates:
            return embedding, stacked
        return embedding

    def classify(self, embedding: torch.Tensor) -> torch.Tensor:
        """Class logits; softmax is left to the losses."""
        if not torch.isfinite(embedding).all():
            raise ValueError("non-finite embedding")
        return self.classifier(embedding)

    def forward(
        self,
        features: torch.Tensor,
        plan: RelationPlan,
        train: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        embedding = self.aggregate(features, plan, train=train, generator=generator)
        return embedding, self.classify(embedding)


def save_aggregator(model: TranRdAggregator, path) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    storage.save_checkpoint(state, model.hyperparams, path)


def load_aggregator(path) -> TranRdAggregator:
    hyper, state = storage.load_checkpoint(path)
    model = TranRdAggregator(**hyper)
    model.load_state_dict(
        {k: torch.as_tensor(np.asarray(v)) for k, v in state.items()}
    )
    return model
