"""Mask-guided stochastic augmentation and fine-tuning.

During fine-tuning every training subject's graph is re-drawn each epoch:
an edge whose noise-free importance sigma(logit) reaches the threshold is
always kept, anything below it survives a fair coin flip. The same rule
gates the fusion edges. Absent edges (weight zero) are never resurrected;
masks only gate existing structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Connectome, ConnectomeDataset, KnowledgeBase, Split, ValidationError
from .masks import GroupingError, MaskPair, MaskSet
from .model import (
    MultimodalModel,
    TrainConfig,
    _accuracy_and_loss,
    forward,
    stream_rng,
)
from .optim import make_optimizer
from .tensor import ComputationTape, Tensor, backward, cross_entropy, mul
from .model import TrainingError

DROP_PROBABILITY = 0.5


@dataclass
class AugmentConfig:
    threshold: float = 0.5
    drop_probability: float = DROP_PROBABILITY  # fixed coin for below-threshold edges
    epochs: int = 50
    learning_rate: float = 2e-4
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def _sigma(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _keep_vector(logits: np.ndarray, threshold: float, keep_prob: float, rng) -> np.ndarray:
    scores = _sigma(logits)
    coins = rng.random(logits.shape)
    return np.where(scores >= threshold, 1.0, (coins < keep_prob).astype(np.float64))


def augment_graph(
    g: Connectome, pair: MaskPair, cfg: AugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    """Thresholded stochastic edge retention; support never grows."""
    if pair.num_nodes != g.num_nodes:
        raise ValidationError(
            f"mask covers {pair.num_nodes} nodes but subject {g.subject_id} has {g.num_nodes}"
        )
    keep_upper = _keep_vector(pair.alpha.data, cfg.threshold, 1.0 - cfg.drop_probability, rng)
    v = g.num_nodes
    keep = np.zeros((v, v))
    iu = np.triu_indices(v, k=1)
    keep[iu] = keep_upper
    keep[(iu[1], iu[0])] = keep_upper
    return np.where(keep > 0, g.adjacency, 0.0)


def augment_fusion(beta: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Binary fusion-edge indicator under the same retention rule."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.size == 0:
        raise ValidationError("augment_fusion: no fusion edges (knowledge base is empty)")
    return _keep_vector(beta, cfg.threshold, 1.0 - cfg.drop_probability, rng)


def finetune(
    model: MultimodalModel,
    maskset: MaskSet,
    ds: ConnectomeDataset,
    kb: KnowledgeBase,
    split: Split,
    cfg: AugmentConfig,
) -> tuple[MultimodalModel, list[dict]]:
    """Train all model parameters on freshly augmented inputs each epoch.

    Mask logits stay untouched. Augmentation draws come from streams keyed by
    (seed, epoch, subject), so a rerun is bit-identical. Validation uses
    clean, unaugmented inputs and the best-val state is returned.
    """
    cfg.validate()
    if not split.train:
        raise ValidationError("finetune needs a nonempty train split")
    if not split.val:
        raise ValidationError("finetune needs a nonempty val split to select a checkpoint")
    missing = sorted({ds.subjects[i].group for i in split.train} - set(maskset.pairs))
    if missing:
        raise GroupingError(f"no mask pair for groups: {missing}")
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history
    model.set_requires_grad(True)
    opt = make_optimizer("adam", model.parameters(), cfg.learning_rate, weight_decay=0.0)
    best_key: tuple | None = None
    best_state = None
    train = list(split.train)
    for epoch in range(cfg.epochs):
        order = stream_rng(cfg.seed, 0xF1, epoch).permutation(len(train))
        epoch_losses = []
        epoch_correct = 0
        for start in range(0, len(train), cfg.batch_size):
            chunk = [train[j] for j in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            for idx in chunk:
                g = ds.subjects[idx]
                pair = maskset.pairs[g.group]
                w_aug = augment_graph(g, pair, cfg, stream_rng(cfg.seed, 0xF2, epoch, idx))
                ind_aug = augment_fusion(
                    pair.beta.data, cfg, stream_rng(cfg.seed, 0xF3, epoch, idx)
                )
                with ComputationTape():
                    logits = forward(
                        model,
                        g,
                        kb,
                        adjacency_override=w_aug,
                        edge_indicator=Tensor(ind_aug),
                    )
                    loss = cross_entropy(logits, g.label)
                    backward(mul(loss, 1.0 / len(chunk)))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}")
                epoch_losses.append(value)
                if int(np.argmax(logits.data)) == g.label:
                    epoch_correct += 1
            opt.step()
        val_acc, val_loss = _accuracy_and_loss(model, ds, kb, split.val, None)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "train_acc": epoch_correct / len(train),
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        key = (val_acc, -epoch)
        if best_key is None or key > best_key:
            best_key = key
            best_state = model.state_arrays()
    if best_state is not None:
        model.load_state_arrays(best_state)
    return model, history
