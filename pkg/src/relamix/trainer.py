"""Co-training over source, few-shot target, and synthesized feature sets."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .aggregator import TranRdAggregator
from .data import FeatureDataset
from .losses import (
    LossComponents,
    LossWeights,
    aux_loss,
    cdia_loss,
    compute_prototypes,
    cross_entropy,
    sample_negative_indices,
    total_loss,
)
from .relations import build_plan
from .sdfm import build_synthesized_set, compute_source_statistics


@dataclass(frozen=True)
class ExperimentConfig:
    """One run's knobs; the numeric defaults are the reference recipe."""

    shot_count: int = 5
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    initial_lr: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (60, 80)
    lr_decay_factor: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    top_k: int = 2
    alpha: float = 0.21
    dropout_ratio: float = 0.5
    heads: int = 8
    per_class_synth: int = 200
    negatives_pool: str = "mixed"  # or "source_only"
    cdia_positives: str = "prototypes"  # or "permuted"
    negatives_per_anchor: int = 15
    tuples_per_scale: int = 3
    ffn_multiplier: int = 2
    head_combine: str = "sum"
    refresh_synth_each_epoch: bool = False
    disable_rd_mhsa: bool = False
    disable_scale_mhsa: bool = False
    disable_rd: bool = False
    disable_sdfm: bool = False
    disable_cdia: bool = False

    def __post_init__(self):
        if self.negatives_pool not in ("mixed", "source_only"):
            raise ValueError(f"unknown negatives_pool {self.negatives_pool!r}")
        if self.cdia_positives not in ("prototypes", "permuted"):
            raise ValueError(f"unknown cdia_positives {self.cdia_positives!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "weights" in data and isinstance(data["weights"], dict):
            data["weights"] = LossWeights(**data["weights"])
        if "lr_decay_epochs" in data:
            data["lr_decay_epochs"] = tuple(data["lr_decay_epochs"])
        return cls(**data)

    def with_ablations(self, names) -> "ExperimentConfig":
        known = {
            "rd_mhsa": "disable_rd_mhsa",
            "scale_mhsa": "disable_scale_mhsa",
            "rd": "disable_rd",
            "sdfm": "disable_sdfm",
            "cdia": "disable_cdia",
        }
        updates = {}
        for name in names:
            if name not in known:
                raise ValueError(f"unknown ablation {name!r}; choose from {sorted(known)}")
            updates[known[name]] = True
        return replace(self, **updates)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(canonical).hexdigest()[:16]


@dataclass
class TrainResult:
    model: TranRdAggregator
    config: ExperimentConfig
    epoch_metrics: list[dict]

    @property
    def final_metrics(self) -> dict:
        return self.epoch_metrics[-1]


def _tensors(dataset: FeatureDataset) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(dataset.feature_tensor(), dtype=torch.float32)
    y = torch.as_tensor(dataset.labels(), dtype=torch.long)
    return x, y


def learning_rate_at(config: ExperimentConfig, epoch: int) -> float:
    decayed = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.initial_lr * config.lr_decay_factor**decayed


def _permute_snippets(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Independently shuffle the snippet axis of every sequence in a batch."""
    b, t, _ = x.shape
    perms = np.stack([rng.permutation(t) for _ in range(b)])
    idx = torch.as_tensor(perms, dtype=torch.long).unsqueeze(-1).expand(-1, -1, x.shape[-1])
    return x.gather(1, idx)


def _check_compatible(name: str, ds: FeatureDataset, ref: FeatureDataset) -> None:
    if (ds.snippet_count, ds.dim, ds.class_count) != (
        ref.snippet_count,
        ref.dim,
        ref.class_count,
    ):
        raise ValueError(
            f"{name} dataset shape ({ds.snippet_count}, {ds.dim}, C={ds.class_count}) "
            f"does not match source ({ref.snippet_count}, {ref.dim}, C={ref.class_count})"
        )


def train(
    source: FeatureDataset,
    target_fewshot: FeatureDataset | None,
    config: ExperimentConfig,
    run_dir=None,
) -> TrainResult:
    """Run the co-training loop; pass target_fewshot=None for source-only.

    Every step draws a source batch, a few-shot target batch, and a
    synthesized batch, evaluates the active loss terms, and applies one
    Adam update. The synthesized set is built once up front from source
    statistics unless refresh_synth_each_epoch is set.
    """
    if target_fewshot is not None:
        _check_compatible("target", target_fewshot, source)

    rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)
    model = TranRdAggregator(
        dim=source.dim,
        class_count=source.class_count,
        heads=config.heads,
        dropout_ratio=config.dropout_ratio,
        ffn_multiplier=config.ffn_multiplier,
        head_combine=config.head_combine,
        disable_rd_mhsa=config.disable_rd_mhsa,
        disable_scale_mhsa=config.disable_scale_mhsa,
        disable_relation_dropout=config.disable_rd,
        init_seed=config.seed,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr)

    source_x, source_y = _tensors(source)
    target_x = target_y = None
    if target_fewshot is not None:
        target_x, target_y = _tensors(target_fewshot)

    use_sdfm = target_fewshot is not None and not config.disable_sdfm
    use_cdia = target_fewshot is not None and not config.disable_cdia
    stats = compute_source_statistics(source) if use_sdfm else None

    def synth_tensors(epoch: int):
        synth = build_synthesized_set(
            target_fewshot,
            stats,
            config.top_k,
            config.alpha,
            config.per_class_synth,
            seed=config.seed + epoch,
        )
        return _tensors(synth)

    synth_x = synth_y = None
    if use_sdfm:
        synth_x, synth_y = synth_tensors(0)

    loss_writer = metrics_writer = None
    loss_file = metrics_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        loss_file = open(run_dir / "losses.csv", "w", newline="")
        loss_writer = csv.writer(loss_file)
        loss_writer.writerow(["step", "cdia", "ce_source", "ce_target", "ce_synth", "aux", "total"])
        metrics_file = open(run_dir / "metrics.csv", "w", newline="")
        metrics_writer = csv.writer(metrics_file)
        metrics_writer.writerow(
            ["epoch", "lr", "cdia", "ce_source", "ce_target", "ce_synth", "aux", "total"]
        )

    steps_per_epoch = max(1, math.ceil(len(source) / config.batch_size))
    epoch_metrics: list[dict] = []
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = learning_rate_at(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            plan = build_plan(
                source.snippet_count, config.tuples_per_scale, seed=config.seed * 7919 + epoch
            )
            if use_sdfm and config.refresh_synth_each_epoch and epoch > 0:
                synth_x, synth_y = synth_tensors(epoch)

            prototypes = None
            if use_cdia and config.cdia_positives == "prototypes":
                with torch.no_grad():
                    target_emb = model.aggregate(target_x, plan)
                prototypes = compute_prototypes(
                    target_emb, target_y, source.class_count, refresh_epoch=epoch
                )

            order = rng.permutation(len(source))
            sums: dict[str, float] = {
                k: 0.0 for k in ("cdia", "ce_source", "ce_target", "ce_synth", "aux", "total")
            }
            for s in range(steps_per_epoch):
                batch_idx = order[s * config.batch_size : (s + 1) * config.batch_size]
                if batch_idx.size == 0:
                    batch_idx = order[: config.batch_size]
                bx, by = source_x[batch_idx], source_y[batch_idx]

                # One aggregate pass over every sub-batch of the step.
                parts: dict[str, torch.Tensor] = {"src": bx}
                if use_cdia and config.cdia_positives == "permuted":
                    parts["src_pos"] = _permute_snippets(bx, rng)
                ty = sy = None
                if target_fewshot is not None:
                    n = min(config.batch_size, len(target_fewshot))
                    t_idx = rng.choice(
                        len(target_fewshot), size=n, replace=len(target_fewshot) < config.batch_size
                    )
                    parts["tgt"] = target_x[t_idx]
                    ty = target_y[t_idx]
                if use_sdfm:
                    n = min(config.batch_size, len(synth_y))
                    s_idx = rng.choice(len(synth_y), size=n, replace=len(synth_y) < config.batch_size)
                    sx, sy = synth_x[s_idx], synth_y[s_idx]
                    parts["syn"] = sx
                    parts["syn_pos"] = _permute_snippets(sx, rng)
                stacked = model.aggregate(
                    torch.cat(list(parts.values())), plan, train=True, generator=torch_gen
                )
                emb = dict(zip(parts, stacked.split([p.shape[0] for p in parts.values()])))

                src_emb = emb["src"]
                components = LossComponents(ce_source=cross_entropy(model.classify(src_emb), by))
                if target_fewshot is not None:
                    components.ce_target = cross_entropy(model.classify(emb["tgt"]), ty)
                syn_emb = emb.get("syn")
                if use_sdfm:
                    components.ce_synth = cross_entropy(model.classify(syn_emb), sy)
                    neg_idx = sample_negative_indices(
                        sy.numpy(), sy.numpy(), config.negatives_per_anchor, rng
                    )
                    components.aux = aux_loss(
                        syn_emb, sy, emb["syn_pos"], syn_emb[neg_idx], sy[neg_idx]
                    )

                if use_cdia:
                    if config.negatives_pool == "mixed" and syn_emb is not None:
                        pool_emb = torch.cat([src_emb, syn_emb])
                        pool_y = torch.cat([by, sy])
                    else:
                        pool_emb, pool_y = src_emb, by
                    neg_idx = sample_negative_indices(
                        by.numpy(), pool_y.numpy(), config.negatives_per_anchor, rng
                    )
                    if config.cdia_positives == "prototypes":
                        components.cdia = cdia_loss(
                            src_emb, by, prototypes, pool_emb[neg_idx], pool_y[neg_idx]
                        )
                    else:
                        components.cdia = aux_loss(
                            src_emb, by, emb["src_pos"], pool_emb[neg_idx], pool_y[neg_idx]
                        )

                loss = total_loss(components, config.weights)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                values = components.as_floats()
                values["total"] = float(loss.detach())
                for key in sums:
                    sums[key] += values[key]
                if loss_writer is not None:
                    loss_writer.writerow(
                        [step]
                        + [f"{values[k]:.6f}" for k in ("cdia", "ce_source", "ce_target", "ce_synth", "aux")]
                        + [f"{values['total']:.6f}"]
                    )
                step += 1

            means = {k: v / steps_per_epoch for k, v in sums.items()}
            row = {"epoch": epoch, "lr": lr, **means}
            epoch_metrics.append(row)
            if metrics_writer is not None:
                metrics_writer.writerow(
                    [epoch, f"{lr:.8f}"]
                    + [f"{means[k]:.6f}" for k in ("cdia", "ce_source", "ce_target", "ce_synth", "aux", "total")]
                )
    finally:
        if loss_file is not None:
            loss_file.close()
        if metrics_file is not None:
            metrics_file.close()

    return TrainResult(model=model, config=config, epoch_metrics=epoch_metrics)


def evaluate(
    model: TranRdAggregator,
    test: FeatureDataset,
    plan_seed: int = 0,
    tuples_per_scale: int = 3,
    batch_size: int = 256,
) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy (percent) plus per-class accuracies, in eval mode with
    a tuple plan frozen by plan_seed."""
    if len(test) == 0:
        raise ValueError("empty test set")
    plan = build_plan(test.snippet_count, tuples_per_scale, seed=plan_seed)
    x, y = _tensors(test)
    preds = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(test), batch_size):
            emb = model.aggregate(x[i : i + batch_size], plan)
            preds.append(model.classify(emb).argmax(dim=1))
    pred = torch.cat(preds)
    correct = pred == y
    per_class = {}
    for c in range(test.class_count):
        mask = y == c
        if mask.any():
            per_class[c] = 100.0 * float(correct[mask].float().mean())
    return 100.0 * float(correct.float().mean()), per_class
