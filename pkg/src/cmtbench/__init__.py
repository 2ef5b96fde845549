"""Desk-scale conditional anomaly detection workbench.

Generates a synthetic benchmark of part-level shape anomalies (reference
3D objects rendered as multi-view images, plus query renders with one
deformation applied), and trains a correspondence-matching transformer
to classify and localize the anomaly in a query image against its
reference view set.
"""

__version__ = "0.1.0"
