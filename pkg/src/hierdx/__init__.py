"""Hierarchy-aware verifiable rewards, DDx-informed trajectory synthesis, GRPO math and MCQ evaluation."""

__version__ = "0.1.0"
