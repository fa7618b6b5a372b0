"""Self-supervised detector pre-training at desk scale.

Unsupervised region proposals serve as pseudo ground truth for a region
proposal network while a BYOL-style online/target pair contrasts per-proposal
embeddings across augmented views; separate and joint training strategies
plus AP and stratified-error evaluation tooling round out the pipeline.
"""

__version__ = "0.1.0"
