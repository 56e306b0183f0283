"""Synthesis of finite-memory policies for Continuing-PCTL objectives on finite MDPs."""

__version__ = "0.1.0"
