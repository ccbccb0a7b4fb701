"""Desk-scale binary image-classification pipeline for grayscale (MRI-style) slices.

Preprocessing (decision-based median filter + CLAHE), miniature
inception/resnet-family networks trained from scratch with transfer-learning
mechanics, and an exact evaluation harness (confusion matrix, ROC, AUC, MCC).
"""

__version__ = "0.1.0"
