"""Tree-structured variational autoencoder for hierarchical clustering."""
from .config import RunConfig, load_config
from .data import load_dataset, synthetic_hierarchical
from .generative import reconstruct, sample_conditional, sample_unconditional
from .metrics import clustering_accuracy, dendrogram_purity, evaluate, iw_log_likelihood, leaf_purity, nmi
from .model import TreeModel, build_model, load_checkpoint, save_checkpoint
from .objective import compute_terms
from .topology import TreeTopology, grow_at, new_root_tree, prune
from .trainer import run_growing_loop

__version__ = "0.1.0"
