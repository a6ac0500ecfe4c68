"""Meta-test protocol, evaluation reports, ablations and figures."""
