"""FedPrune: federated learning with differential sub-model serving and CLT aggregation."""

__version__ = "0.1.0"
