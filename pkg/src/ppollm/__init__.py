"""PPO-guided prompt-template selection for LLM test generation on C programs."""

__version__ = "0.1.0"
