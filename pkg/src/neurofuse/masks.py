"""Learned importance masks over connectome edges and fusion edges.

A mask entry is sampled with the binary-concrete relaxation
``m = sigmoid((phi + g - g') / tau)`` where g, g' are independent
Gumbel(0, 1) draws. Sampled data masks multiply the adjacency, sampled
knowledge masks replace the fusion edge indicator, and the mask logits are
trained against a frozen model with a four-part objective: agree with the
frozen model's unmasked prediction, agree with the true label, stay sparse,
stay near-binary.

One mask pair is learned per population group and shared by all subjects of
that group. Gumbel noise is keyed by (seed, epoch, subject, stream) so
reruns are bit-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import Connectome, ConnectomeDataset, KnowledgeBase, ValidationError
from .model import MultimodalModel, embed_knowledge, forward, stream_rng
from .optim import Adam
from .tensor import (
    ComputationTape,
    Tensor,
    add,
    backward,
    cross_entropy,
    mul,
    neg,
    no_grad,
    sigmoid,
    softplus,
    symmetrize_upper,
    tensor_mean,
)

HISTOGRAM_BINS = 20


class GroupingError(ValueError):
    """A required population group has no subjects or no mask pair."""


@dataclass
class ExplainConfig:
    lambdas: tuple[float, float, float, float] = (2.0, 2.0, 0.1, 0.05)
    tau: float = 0.5
    epochs: int = 60
    learning_rate: float = 5e-3
    seed: int = 0

    def validate(self) -> None:
        if len(self.lambdas) != 4 or any(l < 0 for l in self.lambdas):
            raise ValidationError(f"lambdas must be four nonnegative weights, got {self.lambdas}")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")


@dataclass
class MaskPair:
    """Edge-importance logits for one group.

    ``alpha`` holds the upper-triangular logits of the data mask, mirrored
    into a symmetric V x V matrix when sampled; ``beta`` holds one logit per
    fusion edge.
    """

    alpha: Tensor
    beta: Tensor
    tau: float
    group: str
    num_nodes: int

    @property
    def num_edges(self) -> int:
        return self.alpha.size

    @property
    def num_knowledge(self) -> int:
        return self.beta.size


@dataclass
class MaskSet:
    pairs: dict[str, MaskPair]
    lambdas: tuple[float, float, float, float]
    tau: float
    threshold_hint: float = 0.5
    seed: int = 0
    history: dict[str, list[dict]] = field(default_factory=dict)


def init_mask_pair(num_nodes: int, num_knowledge: int, tau: float, group: str) -> MaskPair:
    """Logits start at zero: sigma(0) = 0.5, maximally undecided."""
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    n_edges = num_nodes * (num_nodes - 1) // 2
    return MaskPair(
        alpha=Tensor(np.zeros(n_edges), requires_grad=True),
        beta=Tensor(np.zeros(num_knowledge), requires_grad=True),
        tau=tau,
        group=group,
        num_nodes=num_nodes,
    )


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Gumbel(0, 1) draws from -log(-log(u)); u clipped away from {0, 1}."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def relaxed_mask_values(phi, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorized relaxed draws m = sigmoid((phi + g - g') / tau), no tape."""
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    phi = np.asarray(phi, dtype=np.float64)
    g = gumbel_noise(phi.shape, rng)
    g2 = gumbel_noise(phi.shape, rng)
    z = (phi + g - g2) / tau
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def gumbel_sample(phi: float, tau: float, rng: np.random.Generator) -> float:
    """One relaxed mask value in (0, 1)."""
    return float(relaxed_mask_values(np.asarray(phi, dtype=np.float64), tau, rng))


def _relaxed(logits: Tensor, tau: float, noise: tuple[np.ndarray, np.ndarray]) -> Tensor:
    g, g2 = noise
    return sigmoid(mul(add(logits, Tensor(g - g2)), 1.0 / tau))


def sample_masked_graph(
    g: Connectome, pair: MaskPair, rng: np.random.Generator | None = None, noise=None
) -> tuple[Tensor, Tensor]:
    """Sampled symmetric mask matrix and masked adjacency W' = M' * W (taped)."""
    if pair.num_nodes != g.num_nodes:
        raise ValidationError(
            f"mask covers {pair.num_nodes} nodes but subject {g.subject_id} has {g.num_nodes}"
        )
    if noise is None:
        noise = (gumbel_noise(pair.num_edges, rng), gumbel_noise(pair.num_edges, rng))
    m_upper = _relaxed(pair.alpha, pair.tau, noise)
    m_full = symmetrize_upper(m_upper, g.num_nodes)
    return m_full, mul(m_full, Tensor(g.adjacency))


def sample_masked_fusion(
    pair: MaskPair, num_knowledge: int, rng: np.random.Generator | None = None, noise=None
) -> Tensor:
    """Sampled per-edge indicator for the fusion star (taped)."""
    if pair.num_knowledge != num_knowledge:
        raise ValidationError(
            f"mask covers {pair.num_knowledge} fusion edges, expected {num_knowledge}"
        )
    if noise is None:
        noise = (gumbel_noise(num_knowledge, rng), gumbel_noise(num_knowledge, rng))
    return _relaxed(pair.beta, pair.tau, noise)


def binary_entropy_from_logits(logits: Tensor) -> Tensor:
    """Mean of H(sigmoid(x)) in nats; logit-space form never takes log(0)."""
    p = sigmoid(logits)
    q = sigmoid(neg(logits))
    return tensor_mean(add(mul(p, softplus(neg(logits))), mul(q, softplus(logits))))


def combine_loss(components, lambdas) -> Tensor:
    agree, label, sparse, discrete = components
    l1, l2, l3, l4 = lambdas
    return add(add(mul(agree, l1), mul(label, l2)), add(mul(sparse, l3), mul(discrete, l4)))


def loss_exp(
    model: MultimodalModel,
    g: Connectome,
    kb: KnowledgeBase | None,
    pair: MaskPair,
    lambdas: tuple[float, float, float, float],
    rng: np.random.Generator | None = None,
    noise_graph=None,
    noise_fusion=None,
    predicted: int | None = None,
    knowledge_cache: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Mask objective for one subject against a frozen model.

    Returns the lambda-weighted total (taped back to the mask logits only)
    and the four component values.
    """
    if knowledge_cache is None:
        with no_grad():
            knowledge_cache = embed_knowledge(model, kb)
    n = knowledge_cache.shape[0]
    if predicted is None:
        with no_grad():
            clean = forward(model, g, kb, knowledge_cache=knowledge_cache)
        predicted = int(np.argmax(clean.data))
    m_full, _ = sample_masked_graph(g, pair, rng, noise=noise_graph)
    indicator = sample_masked_fusion(pair, n, rng, noise=noise_fusion)
    logits = forward(
        model, g, kb, data_mask=m_full, edge_indicator=indicator, knowledge_cache=knowledge_cache
    )
    l_agree = cross_entropy(logits, predicted)
    l_label = cross_entropy(logits, g.label)
    l_sparse = add(tensor_mean(sigmoid(pair.alpha)), tensor_mean(sigmoid(pair.beta)))
    l_disc = add(binary_entropy_from_logits(pair.alpha), binary_entropy_from_logits(pair.beta))
    total = combine_loss((l_agree, l_label, l_sparse, l_disc), lambdas)
    value = total.item()
    if not np.isfinite(value):
        raise ValidationError(f"non-finite mask loss for subject {g.subject_id}")
    components = {
        "agreement": l_agree.item(),
        "label": l_label.item(),
        "sparsity": l_sparse.item(),
        "discreteness": l_disc.item(),
        "total": value,
    }
    return total, components


def learn_masks(
    model: MultimodalModel,
    ds: ConnectomeDataset,
    kb: KnowledgeBase,
    train_indices: list[int],
    cfg: ExplainConfig,
) -> MaskSet:
    """Optimize one mask pair per dataset group over that group's train subjects.

    The model is frozen for the whole procedure; only mask logits update.
    """
    cfg.validate()
    by_group: dict[str, list[int]] = {g: [] for g in ds.groups}
    for i in train_indices:
        by_group[ds.subjects[i].group].append(i)
    empty = [g for g, idx in by_group.items() if not idx]
    if empty:
        raise GroupingError(f"groups with zero training subjects: {empty}")

    model.set_requires_grad(False)
    try:
        with no_grad():
            ek = embed_knowledge(model, kb)
            predicted = {}
            for i in train_indices:
                logits = forward(model, ds.subjects[i], kb, knowledge_cache=ek)
                predicted[i] = int(np.argmax(logits.data))
        pairs: dict[str, MaskPair] = {}
        history: dict[str, list[dict]] = {}
        for group_no, group in enumerate(ds.groups):
            indices = by_group[group]
            pair = init_mask_pair(ds.num_nodes, kb.count, cfg.tau, group)
            opt = Adam([pair.alpha, pair.beta], lr=cfg.learning_rate)
            group_history = []
            for epoch in range(cfg.epochs):
                order = stream_rng(cfg.seed, 0xA1, epoch, group_no).permutation(len(indices))
                sums = {"agreement": 0.0, "label": 0.0, "sparsity": 0.0, "discreteness": 0.0, "total": 0.0}
                for j in order:
                    idx = indices[j]
                    noise_graph = (
                        gumbel_noise(pair.num_edges, stream_rng(cfg.seed, 0xB2, epoch, idx, 0)),
                        gumbel_noise(pair.num_edges, stream_rng(cfg.seed, 0xB2, epoch, idx, 1)),
                    )
                    noise_fusion = (
                        gumbel_noise(kb.count, stream_rng(cfg.seed, 0xB3, epoch, idx, 0)),
                        gumbel_noise(kb.count, stream_rng(cfg.seed, 0xB3, epoch, idx, 1)),
                    )
                    opt.zero_grad()
                    with ComputationTape():
                        total, comps = loss_exp(
                            model,
                            ds.subjects[idx],
                            kb,
                            pair,
                            cfg.lambdas,
                            noise_graph=noise_graph,
                            noise_fusion=noise_fusion,
                            predicted=predicted[idx],
                            knowledge_cache=ek,
                        )
                        backward(total)
                    opt.step()
                    for k in sums:
                        sums[k] += comps[k]
                group_history.append(
                    {"epoch": epoch, **{k: v / len(indices) for k, v in sums.items()}}
                )
            pairs[group] = pair
            history[group] = group_history
    finally:
        model.set_requires_grad(True)
    return MaskSet(
        pairs=pairs,
        lambdas=cfg.lambdas,
        tau=cfg.tau,
        seed=cfg.seed,
        history=history,
    )


def importance_matrix(pair: MaskPair) -> np.ndarray:
    """Noise-free importance scores sigma(alpha) mirrored to V x V, zero diagonal."""
    with no_grad():
        return symmetrize_upper(sigmoid(pair.alpha), pair.num_nodes).data


def roi_importance(pair: MaskPair, atlas: list[str] | None = None) -> list[tuple[int, str, float]]:
    """Rank nodes by the sum of incident edge importances; ties keep node order."""
    m = importance_matrix(pair)
    scores = m.sum(axis=1)
    order = sorted(range(pair.num_nodes), key=lambda v: (-scores[v], v))
    return [
        (v, atlas[v] if atlas is not None else f"node{v}", float(scores[v])) for v in order
    ]


def knowledge_importance(pair: MaskPair) -> tuple[np.ndarray, list[tuple[float, float, int]]]:
    """Per-item sigma(beta) plus a fixed 20-bin histogram over [0, 1]."""
    with no_grad():
        scores = sigmoid(pair.beta).data
    counts, edges = np.histogram(scores, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    hist = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(HISTOGRAM_BINS)]
    return scores, hist


def save_masks(maskset: MaskSet, path: str, num_knowledge: int | None = None) -> None:
    groups = {
        tag: {
            "alpha_logits": pair.alpha.data.tolist(),
            "beta_logits": pair.beta.data.tolist(),
        }
        for tag, pair in maskset.pairs.items()
    }
    any_pair = next(iter(maskset.pairs.values()))
    payload = {
        "groups": groups,
        "tau": maskset.tau,
        "lambdas": list(maskset.lambdas),
        "num_nodes": any_pair.num_nodes,
        "num_knowledge": num_knowledge if num_knowledge is not None else any_pair.num_knowledge,
        "seed": maskset.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_masks(path: str) -> MaskSet:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    tau = float(obj["tau"])
    v = int(obj["num_nodes"])
    n = int(obj["num_knowledge"])
    pairs = {}
    for tag, entry in obj["groups"].items():
        alpha = np.asarray(entry["alpha_logits"], dtype=np.float64)
        beta = np.asarray(entry["beta_logits"], dtype=np.float64)
        if alpha.size != v * (v - 1) // 2:
            raise ValidationError(f"{path}: group {tag} alpha length {alpha.size} mismatches V={v}")
        if beta.size != n:
            raise ValidationError(f"{path}: group {tag} beta length {beta.size} mismatches N={n}")
        pairs[tag] = MaskPair(
            alpha=Tensor(alpha, requires_grad=True),
            beta=Tensor(beta, requires_grad=True),
            tau=tau,
            group=tag,
            num_nodes=v,
        )
    lambdas = tuple(float(x) for x in obj["lambdas"])
    return MaskSet(pairs=pairs, lambdas=lambdas, tau=tau, seed=int(obj.get("seed", 0)))


def write_saliency(pair: MaskPair, atlas: list[str] | None, json_path: str, csv_path: str) -> None:
    ranked = roi_importance(pair, atlas)
    records = [
        {"node": v, "name": name, "score": score, "rank": rank + 1}
        for rank, (v, name, score) in enumerate(ranked)
    ]
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"group": pair.group, "saliency": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "name", "score", "rank"])
        for r in records:
            writer.writerow([r["node"], r["name"], repr(r["score"]), r["rank"]])


def write_knowledge_histogram(pair: MaskPair, json_path: str, csv_path: str) -> None:
    scores, hist = knowledge_importance(pair)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "group": pair.group,
                "bins": [{"bin_left": l, "bin_right": r, "count": c} for l, r, c in hist],
                "num_items": int(scores.size),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for l, r, c in hist:
            writer.writerow([repr(l), repr(r), c])
