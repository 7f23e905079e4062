"""
PHP audio-visual prompting - desk-scale incremental learning engine
Frozen dual encoders, three adapter stages, protocol runner and metrics
"""

__version__ = "1.0"
