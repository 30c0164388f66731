"""Online preference-based RL with double-checked, self-augmented LLM feedback."""

__version__ = "0.1.0"
