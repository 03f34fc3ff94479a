"""Affordance maps for active-inference navigation.

Modules:

* ``tensor_nn``: dense-array layers, backprop, Adam and gradient clipping
* ``models``: vision and transition networks, checkpoints
* ``env_sim``: the thruster-vehicle arena and local views
* ``maps``: built-in arenas for the experiments
* ``training``: exploration datasets and NLL training
* ``planning``: expected-free-energy rollouts, gradient and CEM planners
* ``analysis``: affordance-map images and metric aggregation
* ``experiments`` and ``cli``: experiment recipes and the command line
"""

__version__ = "0.1.0"
