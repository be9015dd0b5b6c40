"""Power-flow surrogate workbench.

Submodules:
  grid      case loading/validation and Y-bus assembly
  powerflow Newton-Raphson AC power flow and operating-limit checks
  datagen   dataset generation, perturbation, and JSONL serialization
  nn        dense-tensor reverse-mode gradient engine and training loop
  models    FCNN / GNN / GAT regressors over the grid topology
  can       similarity-graph learning with adaptive neighbors
  sscrf     semi-supervised CRF + attention-net fault labeling via EM
  bench     experiment matrix, metrics aggregation, report emission
"""

__version__ = "0.1.0"
