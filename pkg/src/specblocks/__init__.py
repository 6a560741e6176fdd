"""Composable structure-preserving operator blocks on spectral baseplates.

Modules, bottom-up: ``baseplate`` (trial spaces and transforms), ``refops``
(trusted reference fields), ``nnet`` (MLPs, second-order gradients,
AdamW), ``generators`` (scalar energies and Hamiltonians), ``blocks``
(mechanism fields with fixed structure operators), ``training``
(operator-matching pretraining), ``rollout`` (Strang composition),
``diagnostics`` (errors and studies), ``experiments`` (registry) and
``cli``.
"""

__version__ = "0.1.0"
