"""Unsupervised text line segmentation toolkit.

Pipeline: synthesize or load document pages, learn patch-pair similarity
with a two-branch convolutional network, embed pages into a per-cell
feature grid, render the top principal components as a pseudo-RGB image,
threshold it into blob lines, and assign connected components to lines by
graph-cut energy minimization. Includes LIU/PIU evaluation.
"""

__version__ = "0.1.0"
