"""Distributed neuroevolution of image classifiers.

Architectures are DNA graphs mutated one edit at a time; a pool of workers runs
tournament selection against a shared population directory, training every child
for a fixed number of steps with weights inherited from its parent where shapes match.
"""

from .dna import Dna, new_initial_dna
from .experiment import ExperimentConfig, run_experiment
from .mutations import MutationKind, reproduce

__all__ = ["Dna", "ExperimentConfig", "MutationKind", "new_initial_dna", "reproduce",
           "run_experiment"]
__version__ = "0.1.0"
