"""Joint Bayesian speaker-verification back end and its Siamese-network form."""
