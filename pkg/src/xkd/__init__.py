"""Explainable knowledge distillation: two-phase teacher/student training with Score-CAM alignment."""

__version__ = "0.1.0"
