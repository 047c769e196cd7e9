"""pathbias: neural bias forces for rare transition-path sampling.

A self-contained numpy library that trains a parameterized bias force to
steer Langevin dynamics from one meta-stable state of a potential into
another, by minimizing the variance (over replayed trajectories) of the log
ratio between the unbiased target path density and the biased one.
"""

__version__ = "0.1.0"
