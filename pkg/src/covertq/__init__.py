"""covertq: covert cycle stealing in an M/G/1 FIFO queue.

Simulation of an adversary slipping jobs into a legitimate Poisson job
stream, the observer's optimal likelihood-ratio detectors, closed-form
detectability bounds evaluated by quadrature, and desk-scale experiments
that exhibit the covertness phase transition.
"""

__version__ = "0.1.0"
