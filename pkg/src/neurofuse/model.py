"""The knowledge-fused multimodal model: backbone GNN over the connectome,
adapter MLP over precomputed knowledge embeddings, a star-shaped fusion
graph joining the pooled graph node to every knowledge node, a fusion GNN,
and a classifier head on the fusion-center embedding.

The fusion star is never materialized as an (N+1) x (N+1) matrix; each
fusion layer is evaluated in closed form from the N-vector of edge
indicators, keeping cost linear in N. Tests check the closed forms against
the generic dense layers on an explicitly materialized star adjacency.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import gnn
from .dataio import Connectome, ConnectomeDataset, FormatError, KnowledgeBase, Split, ValidationError
from .optim import make_optimizer
from .tensor import (
    ComputationTape,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    div,
    exp,
    leaky_relu,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    rsqrt,
    slice_rows,
    sub,
    tensor_sum,
    tile_cols,
    tile_rows,
    transpose,
)

ARCHS = ("gcn", "gine", "gat")

CHECKPOINT_VERSION = 1
PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or hit an unusable state."""


@dataclass
class ModelConfig:
    arch: str
    num_nodes: int
    num_classes: int
    knowledge_dim: int
    d_hidden: int = 64
    d_fusion: int = 64
    backbone_layers: int = 2
    fusion_layers: int = 1
    gat_heads: int = 1
    feature_mode: str = "identity"

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValidationError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.feature_mode not in ("identity", "profile"):
            raise ValidationError(f"unknown feature_mode {self.feature_mode!r}")
        for name in ("num_nodes", "num_classes", "knowledge_dim", "d_hidden", "d_fusion"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.backbone_layers < 1 or self.fusion_layers < 1:
            raise ValidationError("layer counts must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 8  # gradient-accumulation count
    seed: int = 0
    weight_decay: float = 5e-4
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class FusionGraph:
    """Star graph: one center node, N knowledge leaves, one edge per leaf."""

    center_feature: Tensor  # (d_f,)
    knowledge_features: Tensor  # (N, d_f)
    edge_indicator: Tensor  # (N,), entries in [0, 1]


class MultimodalModel:
    def __init__(
        self,
        config: ModelConfig,
        backbone: list[gnn.LayerParams],
        knowledge_adapter: gnn.MLPParams,
        graph_projection: gnn.MLPParams,
        fusion: list[gnn.LayerParams],
        classifier: gnn.MLPParams,
    ):
        self.config = config
        self.backbone = backbone
        self.knowledge_adapter = knowledge_adapter
        self.graph_projection = graph_projection
        self.fusion = fusion
        self.classifier = classifier

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.backbone):
            out.extend(gnn.named_layer_params(f"backbone.{i}", layer))
        out.extend(gnn.named_mlp_params("knowledge_adapter", self.knowledge_adapter))
        out.extend(gnn.named_mlp_params("graph_projection", self.graph_projection))
        for i, layer in enumerate(self.fusion):
            out.extend(gnn.named_layer_params(f"fusion.{i}", layer))
        out.extend(gnn.named_mlp_params("classifier", self.classifier))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def param_checksum(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.digest()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.data = a.copy()


def build_model(config: ModelConfig, seed: int) -> MultimodalModel:
    """Seeded Glorot-initialized model; adapter and projection land on d_fusion."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6D6F64])))
    d_in = config.num_nodes  # identity and profile features are both V wide
    dims = [d_in] + [config.d_hidden] * config.backbone_layers
    backbone = [
        gnn.init_layer(config.arch, a, b, rng, heads=config.gat_heads)
        for a, b in zip(dims[:-1], dims[1:])
    ]
    adapter = gnn.init_mlp([config.knowledge_dim, config.d_fusion, config.d_fusion], rng)
    projection = gnn.init_mlp([config.d_hidden, config.d_fusion], rng)
    fusion = [
        gnn.init_layer(config.arch, config.d_fusion, config.d_fusion, rng, heads=config.gat_heads)
        for _ in range(config.fusion_layers)
    ]
    classifier = gnn.init_mlp([config.d_fusion, config.num_classes], rng)
    return MultimodalModel(config, backbone, adapter, projection, fusion, classifier)


def node_features(adjacency: np.ndarray, mode: str) -> np.ndarray:
    if mode == "identity":
        return np.eye(adjacency.shape[0])
    if mode == "profile":
        return adjacency.copy()
    raise ValidationError(f"unknown feature_mode {mode!r}")


def embed_graph(model: MultimodalModel, g: Connectome, w_adj: Tensor | None = None) -> Tensor:
    """Backbone node embeddings (V, d_hidden); final backbone layer unactivated."""
    w = w_adj if w_adj is not None else Tensor(g.adjacency)
    if w.shape[0] != model.config.num_nodes:
        raise ValidationError(
            f"graph has {w.shape[0]} nodes but model expects {model.config.num_nodes}"
        )
    h = Tensor(node_features(w.data, model.config.feature_mode))
    last = len(model.backbone) - 1
    for i, layer in enumerate(model.backbone):
        h = gnn.layer_forward(h, w, layer, activate=(i < last))
    return h


def embed_knowledge(model: MultimodalModel, kb: KnowledgeBase) -> Tensor:
    """Row-wise adapter application; row i always encodes knowledge item i."""
    if kb.dim != model.config.knowledge_dim:
        raise ValidationError(
            f"knowledge dim {kb.dim} does not match adapter input {model.config.knowledge_dim}"
        )
    return gnn.mlp_forward(Tensor(kb.embeddings), model.knowledge_adapter)


def build_fusion_graph(
    e_graph: Tensor,
    e_knowledge: Tensor,
    model: MultimodalModel,
    edge_indicator: Tensor | None = None,
) -> FusionGraph:
    pooled = reshape(gnn.mean_pool(e_graph), (1, e_graph.shape[1]))
    center = reshape(gnn.mlp_forward(pooled, model.graph_projection), (model.config.d_fusion,))
    n = e_knowledge.shape[0]
    ind = edge_indicator if edge_indicator is not None else Tensor(np.ones(n))
    if ind.shape != (n,):
        raise ValidationError(f"edge indicator shape {ind.shape} does not match {n} knowledge rows")
    return FusionGraph(center_feature=center, knowledge_features=e_knowledge, edge_indicator=ind)


def _star_gcn(
    center: Tensor, knodes: Tensor, ind: Tensor, p: gnn.GcnParams, activate: bool
) -> tuple[Tensor, Tensor]:
    n, d = knodes.shape
    a = reshape(ind, (n, 1))
    inv_sqrt_c = rsqrt(add(tensor_sum(a), 1.0))  # scalar
    inv_sqrt_k = rsqrt(add(a, 1.0))  # (N, 1)
    inv_c = mul(inv_sqrt_c, inv_sqrt_c)
    inv_k = mul(inv_sqrt_k, inv_sqrt_k)
    coef = mul(mul(a, inv_sqrt_k), inv_sqrt_c)  # (N, 1)
    center_agg = add(mul(center, inv_c), matmul(transpose(coef), knodes))
    knodes_agg = add(mul(knodes, tile_cols(inv_k, d)), matmul(coef, center))
    center_out = add(matmul(center_agg, p.weight), p.bias)
    knodes_out = add(matmul(knodes_agg, p.weight), tile_rows(p.bias, n))
    if activate:
        center_out, knodes_out = relu(center_out), relu(knodes_out)
    return center_out, knodes_out


def _star_gine(
    center: Tensor, knodes: Tensor, ind: Tensor, p: gnn.GineParams
) -> tuple[Tensor, Tensor]:
    n, d = knodes.shape
    a = reshape(ind, (n, 1))
    support = Tensor((ind.data > 0).astype(np.float64).reshape(n, 1))
    lifted = add(matmul(a, p.edge_weight), tile_rows(p.edge_bias, n))  # (N, d)
    gate = tile_cols(support, d)
    scale = add(p.eps, 1.0)
    center_msg = tensor_sum(mul(relu(add(knodes, lifted)), gate), axis=0, keepdims=True)
    center_agg = add(mul(center, scale), center_msg)
    knode_msg = mul(relu(add(tile_rows(center, n), lifted)), gate)
    knodes_agg = add(mul(knodes, scale), knode_msg)
    return gnn.mlp_forward(center_agg, p.mlp), gnn.mlp_forward(knodes_agg, p.mlp)


def _star_gat(
    center: Tensor, knodes: Tensor, ind: Tensor, p: gnn.GatParams
) -> tuple[Tensor, Tensor]:
    n = knodes.shape[0]
    a = reshape(ind, (n, 1))
    blocked = Tensor(np.where(ind.data.reshape(n, 1) > 0, 0.0, gnn.NEG_MASK))
    center_heads, knode_heads = [], []
    for h in p.heads:
        hc = matmul(center, h.theta)  # (1, dh)
        hk = matmul(knodes, h.theta)  # (N, dh)
        dh = hc.shape[1]
        src_c = matmul(hc, h.att_src)  # (1, 1)
        dst_c = matmul(hc, h.att_dst)  # (1, 1)
        src_k = matmul(hk, h.att_src)  # (N, 1)
        dst_k = matmul(hk, h.att_dst)  # (N, 1)

        # center aggregates over itself plus every live knowledge leaf
        e_cc = leaky_relu(add(src_c, dst_c), gnn.LEAKY_SLOPE)
        e_ck = add(add(leaky_relu(add(src_c, dst_k), gnn.LEAKY_SLOPE), mul(h.edge_coef, a)), blocked)
        logits = concat([e_cc, e_ck], axis=0)  # (N+1, 1)
        shift = float(np.max(logits.data))  # constant; blocked rows never win
        z = exp(sub(logits, shift))
        attn = div(z, tensor_sum(z))
        attn_c = slice_rows(attn, 0, 1)
        attn_k = slice_rows(attn, 1, n + 1)
        center_heads.append(add(mul(hc, attn_c), matmul(transpose(attn_k), hk)))

        # each knowledge leaf aggregates over itself plus the center when live
        e_kk = leaky_relu(add(src_k, dst_k), gnn.LEAKY_SLOPE)
        e_kc = add(add(leaky_relu(add(src_k, dst_c), gnn.LEAKY_SLOPE), mul(h.edge_coef, a)), blocked)
        pair_shift = Tensor(np.maximum(e_kk.data, e_kc.data))
        z_self = exp(sub(e_kk, pair_shift))
        z_center = exp(sub(e_kc, pair_shift))
        denom = add(z_self, z_center)
        knode_heads.append(
            add(
                mul(hk, tile_cols(div(z_self, denom), dh)),
                mul(tile_rows(hc, n), tile_cols(div(z_center, denom), dh)),
            )
        )
    center_out = center_heads[0] if len(center_heads) == 1 else concat(center_heads, axis=1)
    knodes_out = knode_heads[0] if len(knode_heads) == 1 else concat(knode_heads, axis=1)
    return add(center_out, p.bias), add(knodes_out, tile_rows(p.bias, n))


def fusion_forward(model: MultimodalModel, fg: FusionGraph) -> Tensor:
    """Run the fusion layers on the star graph; classify the center embedding."""
    center = reshape(fg.center_feature, (1, model.config.d_fusion))
    knodes = fg.knowledge_features
    ind = fg.edge_indicator
    last = len(model.fusion) - 1
    for i, layer in enumerate(model.fusion):
        if isinstance(layer, gnn.GcnParams):
            center, knodes = _star_gcn(center, knodes, ind, layer, activate=(i < last))
        elif isinstance(layer, gnn.GineParams):
            center, knodes = _star_gine(center, knodes, ind, layer)
        elif isinstance(layer, gnn.GatParams):
            center, knodes = _star_gat(center, knodes, ind, layer)
        else:
            raise TypeError(f"unknown fusion layer {type(layer)}")
    logits = gnn.mlp_forward(center, model.classifier)
    return reshape(logits, (model.config.num_classes,))


def forward(
    model: MultimodalModel,
    g: Connectome,
    kb: KnowledgeBase | None,
    data_mask: Tensor | None = None,
    edge_indicator: Tensor | None = None,
    adjacency_override: np.ndarray | None = None,
    knowledge_cache: Tensor | None = None,
) -> Tensor:
    """Class logits (C,) for one subject.

    ``data_mask`` multiplies the adjacency elementwise; ``edge_indicator``
    replaces the all-ones fusion indicator; ``adjacency_override`` swaps in an
    augmented adjacency; ``knowledge_cache`` skips the adapter (frozen model).
    """
    w = Tensor(adjacency_override if adjacency_override is not None else g.adjacency)
    if data_mask is not None:
        w = mul(data_mask, w)
    e_graph = embed_graph(model, g, w_adj=w)
    if knowledge_cache is not None:
        e_knowledge = knowledge_cache
    else:
        if kb is None:
            raise ValidationError("forward needs a knowledge base or a knowledge cache")
        e_knowledge = embed_knowledge(model, kb)
    fg = build_fusion_graph(e_graph, e_knowledge, model, edge_indicator=edge_indicator)
    return fusion_forward(model, fg)


def stream_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


def _accuracy_and_loss(
    model: MultimodalModel,
    ds: ConnectomeDataset,
    kb: KnowledgeBase,
    indices: list[int],
    edge_indicator: Tensor | None,
) -> tuple[float, float]:
    correct = 0
    losses = []
    with no_grad():
        for i in indices:
            g = ds.subjects[i]
            logits = forward(model, g, kb, edge_indicator=edge_indicator)
            losses.append(cross_entropy(logits, g.label).item())
            if int(np.argmax(logits.data)) == g.label:
                correct += 1
    return correct / len(indices), float(np.mean(losses))


def pretrain(
    model: MultimodalModel,
    ds: ConnectomeDataset,
    kb: KnowledgeBase,
    split: Split,
    cfg: TrainConfig,
    knowledge_enabled: bool = True,
) -> tuple[MultimodalModel, list[dict]]:
    """Minimize mean cross-entropy over the train split; keep the best-val state.

    Per-sample forwards with gradient accumulation over ``batch_size`` subjects.
    ``knowledge_enabled=False`` severs every fusion edge during training and
    validation, which reduces the model to its backbone-plus-center path.
    """
    cfg.validate()
    if not split.train:
        raise ValidationError("pretrain needs a nonempty train split")
    if not split.val:
        raise ValidationError("pretrain needs a nonempty val split to select a checkpoint")
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history
    severed = None
    if not knowledge_enabled:
        severed = Tensor(np.zeros(kb.count))
    model.set_requires_grad(True)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate, cfg.weight_decay)
    best_key: tuple | None = None
    best_state: list[np.ndarray] | None = None
    train = list(split.train)
    for epoch in range(cfg.epochs):
        order = stream_rng(cfg.seed, 0xE0, epoch).permutation(len(train))
        epoch_losses = []
        epoch_correct = 0
        for start in range(0, len(train), cfg.batch_size):
            chunk = [train[j] for j in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            for idx in chunk:
                g = ds.subjects[idx]
                with ComputationTape():
                    logits = forward(model, g, kb, edge_indicator=severed)
                    loss = cross_entropy(logits, g.label)
                    backward(mul(loss, 1.0 / len(chunk)))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                epoch_losses.append(value)
                if int(np.argmax(logits.data)) == g.label:
                    epoch_correct += 1
            opt.step()
        val_acc, val_loss = _accuracy_and_loss(model, ds, kb, split.val, severed)
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


def save_checkpoint(model: MultimodalModel, directory: str, config: dict, seed: int) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.config.arch,
        "dims": asdict(model.config),
        "config": config,
        "seed": seed,
    }
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, PARAMS_FILE), "wb") as fh:
        for name, p in model.named_parameters():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(directory: str) -> tuple[MultimodalModel, dict]:
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported checkpoint version")
    config = ModelConfig(**manifest["dims"])
    model = build_model(config, seed=int(manifest.get("seed", 0)))
    with open(os.path.join(directory, PARAMS_FILE), "rb") as fh:
        blob = fh.read()
    stored: dict[str, np.ndarray] = {}
    off = 0
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        stored[name] = arr
    names = [n for n, _ in model.named_parameters()]
    if sorted(names) != sorted(stored):
        raise FormatError(f"{directory}: checkpoint parameter names do not match architecture")
    for name, p in model.named_parameters():
        arr = stored[name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"{directory}: parameter {name} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr.astype(np.float64).copy()
    return model, manifest
