"""Desk-scale lab for the adversarial-attack-on-attackers output defense.

The package holds a small numeric toolkit, a toy MLP classifier, the logit
post-processing defense with temperature calibration, four score-based query
attacks, calibration/robustness metrics and a command-line harness.
"""

from aaalab.numkit import InvalidInputError

__version__ = "0.1.0"

__all__ = ["InvalidInputError", "__version__"]
