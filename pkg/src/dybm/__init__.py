"""Dynamic Boltzmann machine with delay pruning."""
