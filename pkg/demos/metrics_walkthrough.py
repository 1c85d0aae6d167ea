"""
True-path propagation, Fmax and AUPR on a tiny example
=======================================================
"""

import numpy as np

from protfuse.predictor import aupr, fmax, true_path_propagate

# term 0 is the root, 1 and 2 are its children, 3 is a child of 2
dag = [(0, 1), (0, 2), (2, 3)]
labels = np.array([[1, 1, 0, 0],
                   [1, 0, 1, 1],
                   [1, 0, 1, 0]])
raw = np.array([[0.30, 0.80, 0.10, 0.05],
                [0.20, 0.10, 0.40, 0.70],
                [0.60, 0.30, 0.50, 0.20]])

# a child's score lifts every ancestor
scores = true_path_propagate(raw, dag)
print(scores)

f, tau = fmax(scores, labels)
print(f"Fmax {f:.4f} at threshold {tau:.2f}")
print(f"AUPR {aupr(scores, labels):.4f}")

# propagation can only help a consistent label set
print(f"before propagation: Fmax {fmax(raw, labels)[0]:.4f}, AUPR {aupr(raw, labels):.4f}")
