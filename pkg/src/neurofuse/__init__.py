"""Knowledge-fused GNN classification of brain connectomes.

Pipeline: pretrain a multimodal model (backbone GNN + knowledge fusion),
learn per-group importance masks over graph edges and fusion edges against
the frozen model, then fine-tune the model on mask-guided augmentations.
"""

__version__ = "0.1.0"

from . import augment, bench, dataio, gnn, masks, model, optim, tensor  # noqa: F401
