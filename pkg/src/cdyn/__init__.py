"""cdyn: latent dynamical causal modeling of perturbation snapshot data.

Subpackages map onto the pipeline stages: a minimal reverse-mode tape and
optimizer (`tape`), the generative/inference model (`model`), the training
objective (`losses`), snapshot couplings (`coupling`), the synthetic
benchmark generator (`synthgen`), evaluation metrics (`metrics`), dataset
formats and fold construction (`data`), the training loop (`train`) and the
command line (`cli`).
"""

__version__ = "0.1.0"
