"""Shared helpers for building small assignments by hand."""

import numpy as np

from models import AssignmentMatrix


def homogeneous_assignment(J: int, n: int, M: int = 2) -> AssignmentMatrix:
    """Every cluster entirely on one arm, arms cycling 0..M across clusters."""
    labels = np.repeat((np.arange(J) % (M + 1))[:, None], n, axis=1)
    probs = np.full((J, M + 1), 1.0 / (M + 1))
    return AssignmentMatrix.from_labels(labels, probs)
