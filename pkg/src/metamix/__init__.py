"""metamix: user-level adaptive model selection over a bank of CTR
predictors, trained by episodic meta-learning."""

__version__ = "0.1.0"
